//! One training stage: batching, per-utterance losses, Adam updates,
//! checkpointing and the stage hand-off artifacts.
//!
//! Each utterance in a batch is run through its own recorded graph; the
//! per-utterance gradients are summed in batch order. The result does not
//! depend on how many threads evaluate the utterances.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::{apply_plan, sample_plan, MaskConfig};
use crate::nnet::{self, is_encoder_key, is_head_key, Gradients, ModelConfig, ModelParams, Net, Parts};
use crate::rng;
use crate::train::checkpoint::{average_checkpoints, Checkpoint};
use crate::train::config::{Stage, TrainConfig};
use crate::train::loss::chunk_weights;
use crate::train::optim::{adam_step, lr_at, AdamState};
use crate::vocab::{BOS_ID, EOS_ID};
use crate::FeatureMatrix;

/// One training or evaluation utterance. `tokens` excludes `<S>`/`</S>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub feats: Array2<f64>,
    pub tokens: Option<Vec<usize>>,
}

impl Example {
    pub fn unlabeled(id: impl Into<String>, feats: Array2<f64>) -> Self {
        Self { id: id.into(), feats, tokens: None }
    }

    pub fn labeled(id: impl Into<String>, feats: Array2<f64>, tokens: Vec<usize>) -> Self {
        Self { id: id.into(), feats, tokens: Some(tokens) }
    }

    pub fn from_features(id: impl Into<String>, f: &FeatureMatrix, tokens: Option<Vec<usize>>) -> Self {
        Self { id: id.into(), feats: f.frames().clone(), tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for LossRecord {
    /// `step stage lr loss`, tab separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6e}\t{:.6}", self.step, self.stage, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
}

/// Where a stage's parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum StageInit<'a> {
    Scratch,
    /// Encoder tensors (`M0`); everything else freshly initialized.
    Encoder(&'a ModelParams),
    /// A full encoder-decoder (`M1`, `M2`, …).
    Full(&'a ModelParams),
}

/// Hand-off between stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageArtifacts {
    /// Encoder-only parameters from acoustic pre-training, head discarded.
    pub m0: Option<ModelParams>,
    /// Full parameters from linguistic pre-training (checkpoint average).
    pub m1: Option<ModelParams>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub init_params: ModelParams,
    pub final_params: ModelParams,
    /// Mean of the last `avg_last_n` checkpoints.
    pub averaged: ModelParams,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
    pub artifacts: StageArtifacts,
}

/// Builds the starting parameters of a stage.
pub fn stage_init_params(cfg: &TrainConfig, model: &ModelConfig, init: StageInit<'_>) -> Result<ModelParams> {
    let seed = rng::derive_seed(cfg.seed, "init", cfg.stage.tag() as u64);
    match (cfg.stage, init) {
        (Stage::Acoustic, StageInit::Scratch) => nnet::init_acoustic_params(model, seed),
        (Stage::Acoustic, StageInit::Encoder(m0)) => {
            let mut p = nnet::init_acoustic_params(model, seed)?;
            p.overwrite_from(&m0.subset(is_encoder_key))?;
            Ok(p)
        }
        (Stage::Acoustic, StageInit::Full(_)) => {
            Err(Error::invalid("acoustic pre-training starts from scratch or from an encoder"))
        }
        (_, StageInit::Scratch) => nnet::init_params(model, seed),
        (_, StageInit::Encoder(m0)) => {
            let mut p = nnet::init_params(model, seed)?;
            p.overwrite_from(&m0.subset(is_encoder_key))?;
            Ok(p)
        }
        (Stage::Linguistic, StageInit::Full(m)) => {
            let mut p = nnet::init_params(model, seed)?;
            p.overwrite_from(&m.subset(|k| !is_head_key(k)))?;
            Ok(p)
        }
        (Stage::Posttrain, StageInit::Full(m)) => {
            let base = m.subset(|k| !is_head_key(k));
            let p = nnet::reinit_softmax(&base, model, model.vocab_size, seed)?;
            nnet::check_shapes(model, Parts::SEQ2SEQ, &p)
                .map_err(|e| Error::Shape(format!("incompatible init: {e}")))?;
            if p.len() != nnet::param_shapes(model, Parts::SEQ2SEQ).len() {
                return Err(Error::shape("incompatible init: unexpected extra tensors"));
            }
            Ok(p)
        }
    }
}

fn check_data(cfg: &TrainConfig, model: &ModelConfig, data: &[Example]) -> Result<()> {
    for ex in data {
        if ex.feats.nrows() == 0 {
            return Err(Error::invalid(format!("utterance {} has no frames", ex.id)));
        }
        if ex.feats.ncols() != model.input_dim {
            return Err(Error::shape(format!(
                "utterance {} has {}-dim features, model expects {}",
                ex.id,
                ex.feats.ncols(),
                model.input_dim
            )));
        }
        if cfg.stage.is_supervised() {
            match &ex.tokens {
                None => {
                    return Err(Error::invalid(format!(
                        "{} stage needs transcripts; utterance {} has none",
                        cfg.stage, ex.id
                    )))
                }
                Some(t) if t.iter().any(|&id| id >= model.vocab_size) => {
                    return Err(Error::invalid(format!("utterance {} has token ids outside the vocabulary", ex.id)))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn decoder_io(tokens: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(tokens);
    let targets = tokens.iter().copied().chain([EOS_ID]).map(Some).collect();
    (input, targets)
}

/// Mask plan seed for one utterance in one epoch.
pub fn mask_seed(global: u64, utt_id: &str, epoch: u64) -> u64 {
    rng::derive_seed(global, utt_id, epoch)
}

/// Loss contribution of one utterance, already divided by `norm`, plus its
/// gradients when `train` is set.
#[allow(clippy::too_many_arguments)]
fn utterance_loss(
    stage: Stage,
    model: &ModelConfig,
    params: &ModelParams,
    ex: &Example,
    mask: &MaskConfig,
    mask_seed: u64,
    label_smoothing: f64,
    norm: f64,
    train: Option<(u64, bool)>,
) -> Result<(f64, Option<Gradients>)> {
    let mut net = Net::new(model, params);
    if let Some((dropout_seed, freeze)) = train {
        net = net.with_dropout(rng::rng_from(dropout_seed));
        if freeze {
            net = net.freeze_encoder();
        }
    }
    let pad = vec![false; ex.feats.nrows()];
    let loss = match stage {
        Stage::Acoustic => {
            let plan = sample_plan(ex.feats.nrows(), mask, mask_seed)?;
            let f = FeatureMatrix::new(ex.feats.clone(), 1.0)?;
            let masked = apply_plan(&f, &plan)?;
            let h = net.encode(&ex.id, masked.frames(), &pad)?;
            let rec = net.reconstruct(h)?;
            let g = net.graph_mut();
            let sq = g.weighted_sq_error(rec, ex.feats.clone(), chunk_weights(&plan));
            g.scale(sq, 1.0 / norm)
        }
        Stage::Linguistic | Stage::Posttrain => {
            let tokens = ex.tokens.as_deref().unwrap_or_default();
            let (input, targets) = decoder_io(tokens);
            let h = net.encode(&ex.id, &ex.feats, &pad)?;
            let lp = net.decode(h, &pad, &input)?;
            let g = net.graph_mut();
            let nll = g.smoothed_nll(lp, targets, label_smoothing);
            g.scale(nll, 1.0 / norm)
        }
    };
    let value = net.graph().scalar(loss);
    let grads = match train {
        Some(_) => Some(net.backward(loss)?),
        None => None,
    };
    Ok((value, grads))
}

fn batch_norm(stage: Stage, mask: &MaskConfig, batch: &[&Example]) -> f64 {
    match stage {
        Stage::Acoustic => (batch.len() * mask.k) as f64,
        _ => batch
            .iter()
            .map(|e| e.tokens.as_ref().map_or(0, |t| t.len() + 1))
            .sum::<usize>() as f64,
    }
}

/// Stage loss over a full example set: masked MSE per `B·K` for the acoustic
/// stage (plans seeded per utterance, independent of training epochs), and
/// label-smoothed cross-entropy per token otherwise.
pub fn evaluate(cfg: &TrainConfig, model: &ModelConfig, params: &ModelParams, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    check_data(cfg, model, data)?;
    let refs: Vec<&Example> = data.iter().collect();
    let norm = batch_norm(cfg.stage, &cfg.mask, &refs);
    let parts: Vec<f64> = data
        .par_iter()
        .map(|ex| {
            let seed = mask_seed(cfg.seed, &ex.id, u64::MAX);
            utterance_loss(cfg.stage, model, params, ex, &cfg.mask, seed, cfg.label_smoothing, norm, None)
                .map(|(v, _)| v)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Runs one stage to `max_steps`.
pub fn run_stage(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &[Example],
    valid: &[Example],
    init: StageInit<'_>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_data(cfg, model, data)?;
    check_data(cfg, model, valid)?;

    let init_params = stage_init_params(cfg, model, init)?;
    let mut params = init_params.clone();
    let mut opt = AdamState::default();
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = data.len();
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == data.len() {
                epoch += 1;
                order.sort_unstable();
                order.shuffle(&mut rng::derived_rng(cfg.seed, "shuffle", epoch));
                cursor = 0;
            }
            batch.push((&data[order[cursor]], epoch));
            cursor += 1;
        }
        let refs: Vec<&Example> = batch.iter().map(|(e, _)| *e).collect();
        let norm = batch_norm(cfg.stage, &cfg.mask, &refs);
        let results: Vec<(f64, Option<Gradients>)> = batch
            .par_iter()
            .map(|(ex, ep)| {
                let dropout_seed = rng::derive_seed(cfg.seed, &ex.id, step as u64);
                utterance_loss(
                    cfg.stage,
                    model,
                    &params,
                    ex,
                    &cfg.mask,
                    mask_seed(cfg.seed, &ex.id, *ep),
                    cfg.label_smoothing,
                    norm,
                    Some((dropout_seed, cfg.freeze_encoder)),
                )
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads = Gradients::new();
        for (v, g) in results {
            loss += v;
            grads.accumulate(&g.expect("training pass returns gradients"))?;
        }
        if !loss.is_finite() {
            log::error!("{} stage: non-finite loss {loss} at step {step}", cfg.stage);
            return Err(Error::Numeric { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let n = grads.global_norm();
            if n > cfg.grad_clip {
                grads.scale(cfg.grad_clip / n);
            }
        }
        let lr = lr_at(step, cfg.warmup_steps, model.d_model, cfg.lr_scale);
        adam_step(&mut params, &grads, &mut opt, &cfg.adam, lr)?;

        if step % cfg.log_every == 0 {
            let rec = LossRecord { step, stage: cfg.stage, lr, loss };
            log::debug!("{rec}");
            log.push(rec);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
            checkpoints.push(Checkpoint::new(params.clone(), Some(opt.clone()), step as u64, cfg.stage));
        }
        let eval_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.max_steps;
        if eval_now && !valid.is_empty() {
            evals.push(EvalRecord { step, loss: evaluate(cfg, model, &params, valid)? });
        }
    }

    let tail = checkpoints.len().saturating_sub(cfg.avg_last_n);
    let averaged = average_checkpoints(&checkpoints[tail..])?;
    let artifacts = match cfg.stage {
        Stage::Acoustic => StageArtifacts { m0: Some(averaged.subset(is_encoder_key)), m1: None },
        Stage::Linguistic => StageArtifacts { m0: None, m1: Some(averaged.clone()) },
        Stage::Posttrain => StageArtifacts::default(),
    };
    Ok(StageOutcome {
        stage: cfg.stage,
        init_params,
        final_params: params,
        averaged,
        checkpoints,
        log,
        evals,
        artifacts,
    })
}
