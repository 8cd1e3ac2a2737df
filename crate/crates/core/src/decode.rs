//! Beam search with a length penalty, and greedy decoding.
//!
//! Hypotheses are ranked by `logprob_sum / lp(len)` with
//! `lp(len) = ((5 + len) / 6)^alpha`, where `len` counts the tokens after
//! `<S>` including `</S>`. Equal scores are ordered by token sequence,
//! lexicographically ascending. `max_len` bounds the number of generated
//! tokens, `</S>` included.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nnet::{self, ModelConfig, ModelParams};
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

/// Step-wise next-token log-distribution provider.
pub trait StepScorer {
    /// Log-probabilities of the next token after `prefix` (which starts
    /// with `<S>`). Tokens that must never be emitted carry `-inf`.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self(prefix))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 13, alpha: 0.6, max_len: 100 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::invalid("beam_size and max_len must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("length penalty alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with `<S>`; ends with `</S>` iff finished.
    pub tokens: Vec<usize>,
    pub logprob_sum: f64,
    pub finished: bool,
    pub score: f64,
    /// `</S>` was appended because `max_len` ran out.
    pub forced: bool,
}

impl BeamHypothesis {
    /// Tokens between `<S>` and `</S>`.
    pub fn content(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    fn finish(mut self, alpha: f64, forced: bool) -> Self {
        if forced {
            self.tokens.push(EOS_ID);
        }
        self.finished = true;
        self.forced = forced;
        self.score = self.logprob_sum / length_penalty(self.tokens.len() - 1, alpha);
        self
    }
}

fn by_logprob(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.logprob_sum.total_cmp(&a.logprob_sum).then_with(|| a.tokens.cmp(&b.tokens))
}

fn by_score(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Ranked finished hypotheses, best first, at most `beam_size` of them.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let mut live = vec![BeamHypothesis {
        tokens: vec![BOS_ID],
        logprob_sum: 0.0,
        finished: false,
        score: 0.0,
        forced: false,
    }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    let bound_lp = length_penalty(cfg.max_len, cfg.alpha);

    for _ in 0..cfg.max_len {
        let mut cands = Vec::new();
        for hyp in &live {
            let lp = scorer.log_probs(&hyp.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("scorer returned {l} for token {tok}")));
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                cands.push(BeamHypothesis { tokens, logprob_sum: hyp.logprob_sum + l, ..hyp.clone() });
            }
        }
        cands.sort_by(by_logprob);
        cands.truncate(cfg.beam_size);
        live.clear();
        for c in cands {
            if c.tokens.last() == Some(&EOS_ID) {
                pool.push(c.finish(cfg.alpha, false));
            } else {
                live.push(c);
            }
        }
        pool.sort_by(by_score);
        pool.truncate(cfg.beam_size);

        if live.is_empty() {
            break;
        }
        if pool.len() == cfg.beam_size {
            let best_live = live.iter().map(|h| h.logprob_sum).fold(f64::NEG_INFINITY, f64::max);
            let worst = pool.last().map_or(f64::NEG_INFINITY, |h| h.score);
            if best_live / bound_lp < worst {
                break;
            }
        }
    }

    if pool.is_empty() {
        pool = live.into_iter().map(|h| h.finish(cfg.alpha, true)).collect();
        pool.sort_by(by_score);
        pool.truncate(cfg.beam_size);
    }
    if pool.is_empty() {
        return Err(Error::invalid("scorer admits no continuation of <S>"));
    }
    Ok(pool)
}

/// Argmax path (lowest id on ties) until `</S>` or `max_len` tokens, scored
/// like a beam hypothesis; runs out of length the same way beam search does.
pub fn greedy_search<S: StepScorer + ?Sized>(scorer: &S, max_len: usize, alpha: f64) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis { tokens: vec![BOS_ID], logprob_sum: 0.0, finished: false, score: 0.0, forced: false };
    for _ in 0..max_len {
        let lp = scorer.log_probs(&hyp.tokens)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("scorer returned {l} for token {tok}")));
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((tok, l));
            }
        }
        let (tok, l) = best.ok_or_else(|| Error::invalid("scorer admits no continuation"))?;
        hyp.tokens.push(tok);
        hyp.logprob_sum += l;
        if tok == EOS_ID {
            return Ok(hyp.finish(alpha, false));
        }
    }
    Ok(hyp.finish(alpha, true))
}

/// Argmax token per step until `</S>` or `max_len` tokens. The returned ids
/// exclude `<S>` and `</S>`.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_search(scorer, max_len, 0.0)?.content().to_vec())
}

/// Scores continuations with a trained encoder-decoder over one encoded
/// utterance. `<S>` and `<PAD>` are never emitted.
pub struct ModelScorer<'a> {
    cfg: &'a ModelConfig,
    params: &'a ModelParams,
    h: Array2<f64>,
    pad: Vec<bool>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams, utt_id: &str, feats: &Array2<f64>) -> Result<Self> {
        let pad = vec![false; feats.nrows()];
        let h = nnet::encode(cfg, params, utt_id, feats, &pad)?;
        Ok(Self { cfg, params, h, pad })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut lp = nnet::decode_step(self.cfg, self.params, &self.h, &self.pad, prefix)?;
        lp[BOS_ID] = f64::NEG_INFINITY;
        lp[PAD_ID] = f64::NEG_INFINITY;
        Ok(lp)
    }
}

/// Best hypothesis for one utterance.
pub fn decode_utterance(
    model: &ModelConfig,
    params: &ModelParams,
    utt_id: &str,
    feats: &Array2<f64>,
    cfg: &DecodeConfig,
) -> Result<BeamHypothesis> {
    let scorer = ModelScorer::new(model, params, utt_id, feats)?;
    let mut ranked = beam_search(&scorer, cfg)?;
    let best = ranked.swap_remove(0);
    if best.forced {
        log::warn!("{utt_id}: no hypothesis finished within {} tokens", cfg.max_len);
    }
    Ok(best)
}
