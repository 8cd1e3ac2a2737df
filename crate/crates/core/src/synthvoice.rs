//! Deterministic text-to-feature synthesis.
//!
//! Every corpus token owns a fixed block of `m` feature frames drawn from a
//! seeded Gaussian codebook. An utterance is the concatenation of its tokens'
//! blocks plus i.i.d. Gaussian jitter. The result is acoustically monotonous
//! and linguistically exact, which is all the linguistic stage needs.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::rng;
use crate::vocab::{Vocab, NUM_SPECIAL};

/// Frame rate stamped on synthesized feature matrices.
pub const SYNTH_FRAME_RATE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { frames_per_token: 4, feature_dim: 8, noise_std: 0.02, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_token == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("frames_per_token and feature_dim must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTemplate {
    pub token_id: usize,
    pub template: Array2<f64>,
}

/// Templates keyed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    cfg: SynthConfig,
    templates: BTreeMap<usize, Array2<f64>>,
}

impl TemplateBank {
    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn get(&self, token_id: usize) -> Option<&Array2<f64>> {
        self.templates.get(&token_id)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> impl Iterator<Item = TokenTemplate> + '_ {
        self.templates
            .iter()
            .map(|(&token_id, t)| TokenTemplate { token_id, template: t.clone() })
    }

    /// Smallest Euclidean distance between two distinct templates.
    pub fn min_pairwise_distance(&self) -> f64 {
        let all: Vec<&Array2<f64>> = self.templates.values().collect();
        let mut best = f64::INFINITY;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d = (all[i] - all[j]).mapv(|v| v * v).sum().sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Builds templates for `token_ids` from the seeded codebook.
pub fn build_templates_for(token_ids: &[usize], cfg: &SynthConfig) -> Result<TemplateBank> {
    cfg.validate()?;
    if token_ids.is_empty() {
        return Err(Error::invalid("cannot build templates for an empty vocabulary"));
    }
    let mut templates = BTreeMap::new();
    for &id in token_ids {
        let mut r = rng::derived_rng(cfg.seed, "template", id as u64);
        let t = Array2::from_shape_simple_fn((cfg.frames_per_token, cfg.feature_dim), || {
            StandardNormal.sample(&mut r)
        });
        templates.insert(id, t);
    }
    let bank = TemplateBank { cfg: *cfg, templates };
    if bank.len() > 1 && bank.min_pairwise_distance() <= 0.0 {
        return Err(Error::invalid("template codebook produced coinciding templates"));
    }
    Ok(bank)
}

/// Templates for every corpus symbol of `vocab` (special tokens excluded).
pub fn build_templates(vocab: &Vocab, cfg: &SynthConfig) -> Result<TemplateBank> {
    let ids: Vec<usize> = (NUM_SPECIAL..vocab.len()).collect();
    build_templates_for(&ids, cfg)
}

/// Concatenated templates plus Gaussian jitter drawn from `noise_seed`.
pub fn synthesize(transcript: &[usize], bank: &TemplateBank, noise_seed: u64) -> Result<FeatureMatrix> {
    if transcript.is_empty() {
        return Err(Error::invalid("cannot synthesize an empty transcript"));
    }
    let cfg = bank.cfg;
    let m = cfg.frames_per_token;
    let mut out = Array2::zeros((m * transcript.len(), cfg.feature_dim));
    for (i, &tok) in transcript.iter().enumerate() {
        let t = bank
            .get(tok)
            .ok_or_else(|| Error::invalid(format!("token id {tok} has no synthesis template")))?;
        out.slice_mut(s![i * m..(i + 1) * m, ..]).assign(t);
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut r = rng::rng_from(noise_seed);
        out.mapv_inplace(|v| v + normal.sample(&mut r));
    }
    FeatureMatrix::new(out, SYNTH_FRAME_RATE)
}

/// Noise seed of a named utterance.
pub fn utterance_seed(cfg: &SynthConfig, utt_id: &str) -> u64 {
    rng::derive_seed(cfg.seed, utt_id, 0)
}

/// Synthesizes a whole corpus; output order follows the input.
pub fn synthesize_corpus(items: &[(String, Vec<usize>)], bank: &TemplateBank) -> Result<Vec<FeatureMatrix>> {
    items
        .par_iter()
        .map(|(id, toks)| {
            synthesize(toks, bank, utterance_seed(&bank.cfg, id)).map_err(|e| match e {
                Error::Invalid(msg) => Error::Invalid(format!("{id}: {msg}")),
                other => other,
            })
        })
        .collect()
}

/// Recovers a transcript by matching each block of `m` frames to the nearest
/// template.
pub fn nearest_template_decode(feats: &FeatureMatrix, bank: &TemplateBank) -> Vec<usize> {
    let m = bank.cfg.frames_per_token;
    let x = feats.frames();
    (0..x.nrows() / m)
        .map(|i| {
            let block = x.slice(s![i * m..(i + 1) * m, ..]);
            let mut best = (f64::INFINITY, 0);
            for (&id, t) in &bank.templates {
                let d = (&block - t).mapv(|v| v * v).sum();
                if d < best.0 {
                    best = (d, id);
                }
            }
            best.1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(seed: u64, noise: f64) -> TemplateBank {
        let cfg = SynthConfig { frames_per_token: 4, feature_dim: 8, noise_std: noise, seed };
        build_templates_for(&(4..24).collect::<Vec<_>>(), &cfg).unwrap()
    }

    #[test]
    fn templates_are_seeded_and_shaped() {
        let a = bank(3, 0.0);
        assert_eq!(a, bank(3, 0.0));
        assert_ne!(a, bank(4, 0.0));
        assert_eq!(a.len(), 20);
        assert!(a.templates().all(|t| t.template.dim() == (4, 8)));
    }

    #[test]
    fn templates_are_pairwise_distinct() {
        for seed in 0..10 {
            assert!(bank(seed, 0.0).min_pairwise_distance() > 0.0);
        }
    }

    #[test]
    fn noiseless_synthesis_is_concatenation() {
        let b = bank(1, 0.0);
        let one = synthesize(&[7], &b, 0).unwrap();
        assert_eq!(one.frames(), b.get(7).unwrap());
        let two = synthesize(&[7, 9], &b, 0).unwrap();
        assert_eq!(two.len(), 8);
        assert_eq!(two.frames().slice(s![0..4, ..]), b.get(7).unwrap());
        assert_eq!(two.frames().slice(s![4..8, ..]), b.get(9).unwrap());
    }

    #[test]
    fn jitter_has_requested_spread() {
        let b = bank(2, 0.01);
        let transcript: Vec<usize> = (0..2500).map(|i| 4 + i % 20).collect();
        let f = synthesize(&transcript, &b, 11).unwrap();
        let clean = synthesize(&transcript, &TemplateBank { cfg: SynthConfig { noise_std: 0.0, ..b.cfg }, ..b.clone() }, 0)
            .unwrap();
        let dev = f.frames() - clean.frames();
        let n = dev.len() as f64;
        let mean = dev.sum() / n;
        let std = (dev.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
        assert!((std - 0.01).abs() < 0.001, "std {std}");
    }

    #[test]
    fn unknown_and_empty_transcripts_rejected() {
        let b = bank(1, 0.0);
        assert!(synthesize(&[2], &b, 0).is_err());
        assert!(synthesize(&[], &b, 0).is_err());
        assert!(build_templates_for(&[], &SynthConfig::default()).is_err());
        let bad = SynthConfig { noise_std: -1.0, ..SynthConfig::default() };
        assert!(build_templates_for(&[4], &bad).is_err());
    }

    #[test]
    fn nearest_template_recovers_transcript() {
        let b = bank(5, 0.0);
        let transcript = vec![4, 23, 11, 11, 6];
        let f = synthesize(&transcript, &b, 0).unwrap();
        assert_eq!(nearest_template_decode(&f, &b), transcript);
    }

    #[test]
    fn corpus_is_reproducible() {
        let b = bank(6, 0.05);
        let items = vec![("x".to_string(), vec![4, 5]), ("y".to_string(), vec![6])];
        let a = synthesize_corpus(&items, &b).unwrap();
        assert_eq!(a, synthesize_corpus(&items, &b).unwrap());
        assert_ne!(a[0].frames().slice(s![0..4, ..]), b.get(4).unwrap());
    }

    #[test]
    fn vocab_templates_skip_specials() {
        let v = Vocab::new(["a", "b", "c"]).unwrap();
        let b = build_templates(&v, &SynthConfig::default()).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.get(0).is_none() && b.get(NUM_SPECIAL).is_some());
    }
}
