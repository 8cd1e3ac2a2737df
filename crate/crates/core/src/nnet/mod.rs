//! Transformer encoder-decoder with an optional reconstruction head.
//!
//! Parameter naming:
//!
//! | key prefix            | part                                          |
//! |-----------------------|-----------------------------------------------|
//! | `enc.in.*`            | affine input projection (`input_dim → d`)     |
//! | `enc.{l}.*`           | encoder block `l`                             |
//! | `enc.ln.*`            | final encoder norm (pre-norm only)            |
//! | `head.*`              | reconstruction head (`d → input_dim`)         |
//! | `dec.{l}.self.*`      | decoder self-attention                        |
//! | `dec.{l}.cross.*`     | encoder-decoder attention                     |
//! | `dec.{l}.*`           | remaining decoder block tensors               |
//! | `dec.ln.*`            | final decoder norm (pre-norm only)            |
//! | `softmax.*`           | tied token embedding / output projection, bias|
//!
//! The token embedding is shared between decoder input and output projection,
//! so replacing the softmax layer touches only `softmax.*`.

mod graph;
mod params;
#[cfg(test)]
mod tests;

pub use graph::{Graph, NodeGrads, NodeId, LAYER_NORM_EPS};

/// Loss values shared with the recorded graph ops.
pub(crate) mod graph_values {
    pub(crate) use super::graph::smoothed_nll_value as smoothed_nll;
    pub(crate) use super::graph::weighted_sq_error_value as weighted_sq_error;
}
pub use params::{Gradients, ModelParams};

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SOFTMAX_EMBED: &str = "softmax.embed";
pub const SOFTMAX_BIAS: &str = "softmax.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    /// `LN(x + sublayer(x))`, as in the original Transformer.
    Post,
    /// `x + sublayer(LN(x))` with a final norm on each stack.
    Pre,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
    /// Sinusoidal positional encodings on both stacks.
    pub positional: bool,
}

impl ModelConfig {
    /// 6+6 blocks, d_model 512, 16 heads, FFN 2048, 320-dim stacked input,
    /// 3961 characters plus 4 special tokens.
    pub fn full_size() -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            heads: 16,
            d_ff: 2048,
            vocab_size: 3965,
            input_dim: 320,
            dropout: 0.1,
            norm: NormPlacement::Post,
            positional: true,
        }
    }

    pub fn tiny(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size,
            input_dim,
            dropout: 0.0,
            norm: NormPlacement::Post,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.heads, self.d_ff, self.vocab_size, self.input_dim];
        if dims.contains(&0) {
            return Err(Error::invalid("all model dimensions must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count of the encoder-decoder (no head):
    ///
    /// ```text
    /// input  = i·d + d
    /// attn   = 4·(d² + d)
    /// ffn    = 2·d·f + f + d
    /// enc    = L_e · (attn + ffn + 4d)
    /// dec    = L_d · (2·attn + ffn + 6d)
    /// out    = V·d + V
    /// final  = 4d   (pre-norm only)
    /// ```
    pub fn seq2seq_param_count(&self) -> usize {
        let (d, f, v, i) = (self.d_model, self.d_ff, self.vocab_size, self.input_dim);
        let attn = 4 * (d * d + d);
        let ffn = 2 * d * f + f + d;
        let mut n = i * d + d;
        n += self.enc_layers * (attn + ffn + 4 * d);
        n += self.dec_layers * (2 * attn + ffn + 6 * d);
        n += v * d + v;
        if self.norm == NormPlacement::Pre {
            n += 4 * d;
        }
        n
    }

    /// Head size: `d·i + i`.
    pub fn head_param_count(&self) -> usize {
        self.d_model * self.input_dim + self.input_dim
    }
}

/// Which tensor groups a parameter set holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub encoder: bool,
    pub decoder: bool,
    pub head: bool,
}

impl Parts {
    pub const SEQ2SEQ: Parts = Parts { encoder: true, decoder: true, head: false };
    pub const ACOUSTIC: Parts = Parts { encoder: true, decoder: false, head: true };
    pub const ALL: Parts = Parts { encoder: true, decoder: true, head: true };
}

pub fn is_encoder_key(k: &str) -> bool {
    k.starts_with("enc.")
}

pub fn is_head_key(k: &str) -> bool {
    k.starts_with("head.")
}

pub fn is_softmax_key(k: &str) -> bool {
    k.starts_with("softmax.")
}

pub fn is_decoder_key(k: &str) -> bool {
    k.starts_with("dec.") || is_softmax_key(k)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Names and shapes of every tensor in `parts`, in declaration order.
pub fn param_shapes(cfg: &ModelConfig, parts: Parts) -> Vec<(String, (usize, usize))> {
    shapes(cfg, parts).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn shapes(cfg: &ModelConfig, parts: Parts) -> Vec<(String, (usize, usize), Init)> {
    let (d, f, v, i) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.input_dim);
    let mut out = Vec::new();
    let mut push = |name: String, shape, init| out.push((name, shape, init));
    let attn = |push: &mut dyn FnMut(String, (usize, usize), Init), p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.{m}.w"), (d, d), Init::Glorot);
            push(format!("{p}.{m}.b"), (1, d), Init::Zeros);
        }
    };
    let ln = |push: &mut dyn FnMut(String, (usize, usize), Init), p: &str| {
        push(format!("{p}.g"), (1, d), Init::Ones);
        push(format!("{p}.b"), (1, d), Init::Zeros);
    };
    let ffn = |push: &mut dyn FnMut(String, (usize, usize), Init), p: &str| {
        push(format!("{p}.ff1.w"), (d, f), Init::Glorot);
        push(format!("{p}.ff1.b"), (1, f), Init::Zeros);
        push(format!("{p}.ff2.w"), (f, d), Init::Glorot);
        push(format!("{p}.ff2.b"), (1, d), Init::Zeros);
    };
    if parts.encoder {
        push("enc.in.w".into(), (i, d), Init::Glorot);
        push("enc.in.b".into(), (1, d), Init::Zeros);
        for l in 0..cfg.enc_layers {
            let p = format!("enc.{l}");
            attn(&mut push, &format!("{p}.attn"));
            ln(&mut push, &format!("{p}.ln1"));
            ffn(&mut push, &p);
            ln(&mut push, &format!("{p}.ln2"));
        }
        if cfg.norm == NormPlacement::Pre {
            ln(&mut push, "enc.ln");
        }
    }
    if parts.decoder {
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            attn(&mut push, &format!("{p}.self"));
            ln(&mut push, &format!("{p}.ln1"));
            attn(&mut push, &format!("{p}.cross"));
            ln(&mut push, &format!("{p}.ln2"));
            ffn(&mut push, &p);
            ln(&mut push, &format!("{p}.ln3"));
        }
        if cfg.norm == NormPlacement::Pre {
            ln(&mut push, "dec.ln");
        }
        push(SOFTMAX_EMBED.into(), (v, d), Init::Glorot);
        push(SOFTMAX_BIAS.into(), (1, v), Init::Zeros);
    }
    if parts.head {
        push("head.w".into(), (d, i), Init::Glorot);
        push("head.b".into(), (1, i), Init::Zeros);
    }
    out
}

fn init_tensor(name: &str, shape: (usize, usize), init: Init, seed: u64) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Glorot => {
            let limit = (6.0 / (shape.0 + shape.1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let mut r = rng::derived_rng(seed, name, 0);
            Array2::from_shape_simple_fn(shape, || dist.sample(&mut r))
        }
    }
}

/// Glorot-uniform weights, zero biases, unit norm gains. Each tensor draws from
/// its own stream keyed by `(seed, name)`, so a tensor's initial value does not
/// depend on which other parts are present.
pub fn init_parts(cfg: &ModelConfig, parts: Parts, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    Ok(shapes(cfg, parts)
        .into_iter()
        .map(|(name, shape, init)| {
            let t = init_tensor(&name, shape, init, seed);
            (name, t)
        })
        .collect())
}

/// Full encoder-decoder without the reconstruction head.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_parts(cfg, Parts::SEQ2SEQ, seed)
}

/// Encoder plus reconstruction head.
pub fn init_acoustic_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_parts(cfg, Parts::ACOUSTIC, seed)
}

/// Replaces the softmax layer with a freshly initialized one for
/// `new_vocab_size` outputs. Every other tensor is carried over untouched.
pub fn reinit_softmax(params: &ModelParams, cfg: &ModelConfig, new_vocab_size: usize, seed: u64) -> Result<ModelParams> {
    if !params.contains(SOFTMAX_EMBED) {
        return Err(Error::Mode("parameter set has no softmax layer".into()));
    }
    if new_vocab_size == 0 {
        return Err(Error::invalid("vocabulary must not be empty"));
    }
    let mut out = params.clone();
    let shape = (new_vocab_size, cfg.d_model);
    out.insert(SOFTMAX_EMBED, init_tensor(SOFTMAX_EMBED, shape, Init::Glorot, rng::derive_seed(seed, "reinit", 0)));
    out.insert(SOFTMAX_BIAS, Array2::zeros((1, new_vocab_size)));
    Ok(out)
}

/// Verifies every tensor expected for `parts` exists with the right shape.
pub fn check_shapes(cfg: &ModelConfig, parts: Parts, params: &ModelParams) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape, _) in shapes(cfg, parts) {
        match params.get(&name) {
            None => problems.push(format!("{name}: missing")),
            Some(t) if t.dim() != shape => problems.push(format!("{name}: {:?}, expected {:?}", t.dim(), shape)),
            _ => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Shape(problems.join("; ")))
    }
}

pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Additive attention bias: 0 where `allowed`, `-inf` elsewhere.
fn attention_bias(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| if allowed(i, j) { 0.0 } else { f64::NEG_INFINITY })
}

/// A forward pass under construction: owns the recorded graph and lazily
/// binds parameters on first use.
pub struct Net<'a> {
    cfg: &'a ModelConfig,
    params: &'a ModelParams,
    graph: Graph,
    bound: HashMap<&'a str, NodeId>,
    frozen: Box<dyn Fn(&str) -> bool + 'a>,
    dropout: Option<Rng>,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams) -> Self {
        Self {
            cfg,
            params,
            graph: Graph::new(),
            bound: HashMap::new(),
            frozen: Box::new(|_| false),
            dropout: None,
        }
    }

    /// Parameters matching `frozen` are recorded as constants and get no
    /// gradient entry.
    pub fn with_frozen(mut self, frozen: impl Fn(&str) -> bool + 'a) -> Self {
        self.frozen = Box::new(frozen);
        self
    }

    pub fn freeze_encoder(self) -> Self {
        self.with_frozen(is_encoder_key)
    }

    /// Enables dropout with the configured rate, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: Rng) -> Self {
        if self.cfg.dropout > 0.0 {
            self.dropout = Some(rng);
        }
        self
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        self.graph.value(id)
    }

    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let (key, value) = self
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Mode(format!("parameter {name} is not present in this model")))?;
        let trainable = !(self.frozen)(key);
        let id = self.graph.param(key, value.clone(), trainable);
        self.bound.insert(key, id);
        Ok(id)
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let Some(rng) = self.dropout.as_mut() else { return x };
        let rate = self.cfg.dropout;
        let keep = 1.0 / (1.0 - rate);
        let shape = self.graph.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep });
        self.graph.mul_const(x, mask)
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.graph.affine(x, w, b))
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.graph.layer_norm(x, g, b))
    }

    /// Multi-head scaled dot-product attention. `bias` is added to the raw
    /// scores (`-inf` blocks a query-key pair).
    fn attention(&mut self, q_in: NodeId, kv_in: NodeId, prefix: &str, bias: Option<Array2<f64>>) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let dk = d / self.cfg.heads;
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let k = self.linear(kv_in, &format!("{prefix}.k"))?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let bias = bias.map(|b| self.graph.constant(b));
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let g = &mut self.graph;
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
            if let Some(b) = bias {
                scores = g.add(scores, b);
            }
            let probs = g.softmax(scores);
            heads.push(g.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { self.graph.concat_cols(&heads) };
        self.linear(ctx, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = self.graph.relu(h);
        self.linear(h, &format!("{prefix}.ff2"))
    }

    /// Residual sublayer with the configured norm placement.
    fn sublayer(
        &mut self,
        x: NodeId,
        norm: &str,
        f: impl FnOnce(&mut Self, NodeId) -> Result<NodeId>,
    ) -> Result<NodeId> {
        match self.cfg.norm {
            NormPlacement::Post => {
                let y = f(self, x)?;
                let y = self.dropout(y);
                let sum = self.graph.add(x, y);
                self.norm(sum, norm)
            }
            NormPlacement::Pre => {
                let n = self.norm(x, norm)?;
                let y = f(self, n)?;
                let y = self.dropout(y);
                Ok(self.graph.add(x, y))
            }
        }
    }

    fn add_positions(&mut self, x: NodeId) -> NodeId {
        if !self.cfg.positional {
            return x;
        }
        let (t, d) = self.graph.value(x).dim();
        let pe = self.graph.constant(positional_encoding(t, d));
        self.graph.add(x, pe)
    }

    /// Encoder over a `T × input_dim` sequence. `pad[t]` marks frames that no
    /// position may attend to.
    pub fn encode(&mut self, utt_id: &str, x: &Array2<f64>, pad: &[bool]) -> Result<NodeId> {
        if x.ncols() != self.cfg.input_dim {
            return Err(Error::shape(format!(
                "{utt_id}: input dim {} but model expects {}",
                x.ncols(),
                self.cfg.input_dim
            )));
        }
        if x.nrows() == 0 || pad.len() != x.nrows() {
            return Err(Error::shape(format!("{utt_id}: {} frames with pad mask of {}", x.nrows(), pad.len())));
        }
        if let Some((idx, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("utterance {utt_id}, frame {} dim {}", idx.0, idx.1)));
        }
        let t = x.nrows();
        let bias = pad.iter().any(|&p| p).then(|| attention_bias(t, t, |_, j| !pad[j]));
        let inp = self.graph.constant(x.clone());
        let h = self.linear(inp, "enc.in")?;
        let h = self.add_positions(h);
        let mut h = self.dropout(h);
        for l in 0..self.cfg.enc_layers {
            let p = format!("enc.{l}");
            let b = bias.clone();
            h = self.sublayer(h, &format!("{p}.ln1"), |n, y| n.attention(y, y, &format!("{p}.attn"), b))?;
            h = self.sublayer(h, &format!("{p}.ln2"), |n, y| n.feed_forward(y, &p))?;
        }
        if self.cfg.norm == NormPlacement::Pre {
            h = self.norm(h, "enc.ln")?;
        }
        Ok(h)
    }

    /// Affine projection of encoder states back to the input feature space.
    pub fn reconstruct(&mut self, h: NodeId) -> Result<NodeId> {
        if !self.params.contains("head.w") {
            return Err(Error::Mode("reconstruction head is absent (not in acoustic pre-training mode)".into()));
        }
        self.linear(h, "head")
    }

    /// Log-probabilities (`L × V`) of the next token after each prefix of
    /// `tokens`, attending causally over `tokens` and over the unpadded
    /// encoder states.
    pub fn decode(&mut self, h: NodeId, enc_pad: &[bool], tokens: &[usize]) -> Result<NodeId> {
        let v = self.cfg.vocab_size;
        if tokens.is_empty() {
            return Err(Error::invalid("decoder prefix must contain at least <S>"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let src_len = self.graph.value(h).nrows();
        if enc_pad.len() != src_len {
            return Err(Error::shape("encoder pad mask length differs from encoder states"));
        }
        let len = tokens.len();
        let self_bias = (len > 1).then(|| attention_bias(len, len, |i, j| j <= i));
        let cross_bias = enc_pad
            .iter()
            .any(|&p| p)
            .then(|| attention_bias(len, src_len, |_, j| !enc_pad[j]));

        let table = self.p(SOFTMAX_EMBED)?;
        let emb = self.graph.gather_rows(table, tokens);
        let emb = self.graph.scale(emb, (self.cfg.d_model as f64).sqrt());
        let y = self.add_positions(emb);
        let mut y = self.dropout(y);
        for l in 0..self.cfg.dec_layers {
            let p = format!("dec.{l}");
            let sb = self_bias.clone();
            let cb = cross_bias.clone();
            y = self.sublayer(y, &format!("{p}.ln1"), |n, q| n.attention(q, q, &format!("{p}.self"), sb))?;
            y = self.sublayer(y, &format!("{p}.ln2"), |n, q| n.attention(q, h, &format!("{p}.cross"), cb))?;
            y = self.sublayer(y, &format!("{p}.ln3"), |n, q| n.feed_forward(q, &p))?;
        }
        if self.cfg.norm == NormPlacement::Pre {
            y = self.norm(y, "dec.ln")?;
        }
        let et = self.graph.transpose(table);
        let logits = self.graph.matmul(y, et);
        let bias = self.p(SOFTMAX_BIAS)?;
        let logits = self.graph.add_row(logits, bias);
        Ok(self.graph.log_softmax(logits))
    }

    /// Exact gradients of the scalar `loss` for every trainable parameter used
    /// in the recorded pass.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let grads = self.graph.backward(loss)?;
        Ok(self.graph.param_grads(&grads).into_iter().collect())
    }
}

/// Encoder output without recording gradients.
pub fn encode(cfg: &ModelConfig, params: &ModelParams, utt_id: &str, x: &Array2<f64>, pad: &[bool]) -> Result<Array2<f64>> {
    let mut net = Net::new(cfg, params);
    let h = net.encode(utt_id, x, pad)?;
    Ok(net.value(h).clone())
}

pub fn reconstruct(cfg: &ModelConfig, params: &ModelParams, h: &Array2<f64>) -> Result<Array2<f64>> {
    let mut net = Net::new(cfg, params);
    let hn = net.graph_mut().constant(h.clone());
    let out = net.reconstruct(hn)?;
    Ok(net.value(out).clone())
}

/// Next-token log-distribution after `prefix`.
pub fn decode_step(
    cfg: &ModelConfig,
    params: &ModelParams,
    h: &Array2<f64>,
    enc_pad: &[bool],
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let mut net = Net::new(cfg, params);
    let hn = net.graph_mut().constant(h.clone());
    let lp = net.decode(hn, enc_pad, prefix)?;
    Ok(net.value(lp).row(prefix.len() - 1).to_vec())
}
