//! Random chunk masking for acoustic pre-training.
//!
//! Per utterance of `T` frames: one half-width `w` is drawn uniformly from
//! `{0, …, W}`, then `K` centers are drawn independently and uniformly from
//! `{0, …, T−1}`. Chunk `i` covers frames `max(0, c_i − w) ..= min(c_i + w, T−1)`
//! and is zeroed with probability `zero_prob`, otherwise left intact. Chunks
//! may overlap. Both zeroed and intact chunks are prediction targets.

use ndarray::s;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub k: usize,
    pub w: usize,
    pub zero_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { k: 2, w: 10, zero_prob: 0.8 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("mask chunk count K must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return Err(Error::invalid(format!("zero_prob {} outside [0, 1]", self.zero_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskChunk {
    pub center: usize,
    pub half_width: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub zeroed: bool,
}

impl MaskChunk {
    pub fn clamped(center: usize, half_width: usize, len: usize, zeroed: bool) -> Self {
        Self {
            center,
            half_width,
            start: center.saturating_sub(half_width),
            end: (center + half_width).min(len - 1),
            zeroed,
        }
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn span(&self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub chunks: Vec<MaskChunk>,
    pub len: usize,
    pub seed: u64,
}

impl MaskPlan {
    /// Builds a plan from explicit centers, one shared half-width and per-chunk
    /// zero flags.
    pub fn from_parts(len: usize, half_width: usize, centers: &[usize], zeroed: &[bool]) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("mask plan for an empty sequence"));
        }
        if centers.len() != zeroed.len() {
            return Err(Error::invalid("centers and zero flags differ in length"));
        }
        if let Some(&c) = centers.iter().find(|&&c| c >= len) {
            return Err(Error::invalid(format!("center {c} outside sequence of {len} frames")));
        }
        Ok(Self {
            chunks: centers
                .iter()
                .zip(zeroed)
                .map(|(&c, &z)| MaskChunk::clamped(c, half_width, len, z))
                .collect(),
            len,
            seed: 0,
        })
    }

    pub fn half_width(&self) -> usize {
        self.chunks.first().map_or(0, |c| c.half_width)
    }

    /// Debug line: `id <TAB> w <TAB> start,end,zeroed ...`.
    pub fn dump_line(&self, id: &str) -> String {
        let mut line = format!("{id}\t{}", self.half_width());
        for c in &self.chunks {
            line.push_str(&format!("\t{},{},{}", c.start, c.end, c.zeroed as u8));
        }
        line
    }
}

pub fn sample_plan(len: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskPlan> {
    if len == 0 {
        return Err(Error::invalid("cannot sample a mask plan for T = 0"));
    }
    cfg.validate()?;
    let mut rng = rng::rng_from(seed);
    let w = rng.random_range(0..=cfg.w);
    let chunks = (0..cfg.k)
        .map(|_| {
            let c = rng.random_range(0..len);
            let zeroed = rng.random_bool(cfg.zero_prob);
            MaskChunk::clamped(c, w, len, zeroed)
        })
        .collect();
    Ok(MaskPlan { chunks, len, seed })
}

/// Returns a copy of `f` with the frames of every zeroed chunk set to zero.
pub fn apply_plan(f: &FeatureMatrix, plan: &MaskPlan) -> Result<FeatureMatrix> {
    if plan.len != f.len() {
        return Err(Error::shape(format!(
            "mask plan for {} frames applied to {} frames",
            plan.len,
            f.len()
        )));
    }
    let mut out = f.frames().clone();
    for c in plan.chunks.iter().filter(|c| c.zeroed) {
        out.slice_mut(s![c.start..=c.end, ..]).fill(0.0);
    }
    FeatureMatrix::new(out, f.frame_rate())
}

/// `(chunk, frame)` pairs, chunk by chunk. Overlapping frames appear once per
/// containing chunk.
pub fn masked_indices(plan: &MaskPlan) -> Vec<(usize, usize)> {
    plan.chunks
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.frames().map(move |t| (i, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn forced_chunk_arithmetic() {
        let p = MaskPlan::from_parts(100, 3, &[5], &[true]).unwrap();
        assert_eq!((p.chunks[0].start, p.chunks[0].end), (2, 8));
        let p = MaskPlan::from_parts(100, 5, &[0], &[true]).unwrap();
        assert_eq!((p.chunks[0].start, p.chunks[0].end), (0, 5));
        let p = MaskPlan::from_parts(10, 5, &[8], &[true]).unwrap();
        assert_eq!((p.chunks[0].start, p.chunks[0].end), (3, 9));
    }

    #[test]
    fn zero_length_rejected() {
        assert!(sample_plan(0, &MaskConfig::default(), 1).is_err());
        let bad = MaskConfig { k: 0, ..MaskConfig::default() };
        assert!(sample_plan(5, &bad, 1).is_err());
    }

    fn ramp(t: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::new(Array2::from_shape_fn((t, d), |(i, j)| 1.0 + (i * d + j) as f64), 100.0).unwrap()
    }

    #[test]
    fn zeroed_chunk_clears_rows() {
        let f = ramp(6, 3);
        let plan = MaskPlan::from_parts(6, 1, &[3], &[true]).unwrap();
        let out = apply_plan(&f, &plan).unwrap();
        for t in 0..6 {
            let zero = (2..=4).contains(&t);
            assert_eq!(out.frames().row(t).iter().all(|&v| v == 0.0), zero);
            if !zero {
                assert_eq!(out.frames().row(t), f.frames().row(t));
            }
        }
    }

    #[test]
    fn kept_chunks_leave_input_untouched() {
        let f = ramp(10, 2);
        let plan = MaskPlan::from_parts(10, 4, &[2, 7], &[false, false]).unwrap();
        assert_eq!(apply_plan(&f, &plan).unwrap(), f);
    }

    #[test]
    fn overlapping_zeroed_chunks() {
        let f = ramp(10, 2);
        let plan = MaskPlan {
            chunks: vec![
                MaskChunk { center: 3, half_width: 2, start: 2, end: 5, zeroed: true },
                MaskChunk { center: 5, half_width: 2, start: 4, end: 7, zeroed: true },
            ],
            len: 10,
            seed: 0,
        };
        let once = apply_plan(&f, &plan).unwrap();
        let union: Vec<usize> = (0..10).filter(|t| plan.chunks.iter().any(|c| c.frames().contains(t))).collect();
        assert_eq!(union, (2..=7).collect::<Vec<_>>());
        for t in 0..10 {
            let zero = once.frames().row(t).iter().all(|&v| v == 0.0);
            assert_eq!(zero, union.contains(&t));
        }
        assert_eq!(apply_plan(&once, &plan).unwrap(), once);

        let idx = masked_indices(&plan);
        assert_eq!(idx.len(), 8);
        assert_eq!(idx.iter().filter(|(_, t)| *t == 4).count(), 2);
        assert_eq!(idx.iter().filter(|(_, t)| *t == 5).count(), 2);
    }

    #[test]
    fn index_lists() {
        let plan = MaskPlan::from_parts(10, 1, &[3], &[true]).unwrap();
        assert_eq!(masked_indices(&plan), vec![(0, 2), (0, 3), (0, 4)]);
        let plan = MaskPlan::from_parts(10, 0, &[7], &[false]).unwrap();
        assert_eq!(masked_indices(&plan), vec![(0, 7)]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let plan = MaskPlan::from_parts(5, 1, &[3], &[true]).unwrap();
        assert!(apply_plan(&ramp(6, 1), &plan).is_err());
    }

    #[test]
    fn dump_format() {
        let plan = MaskPlan::from_parts(20, 2, &[1, 10], &[true, false]).unwrap();
        assert_eq!(plan.dump_line("u7"), "u7\t2\t0,3,1\t8,12,0");
    }

    proptest! {
        #[test]
        fn sampled_plans_are_valid_and_deterministic(
            len in 1usize..200, k in 1usize..5, w in 0usize..15, seed in any::<u64>()
        ) {
            let cfg = MaskConfig { k, w, zero_prob: 0.8 };
            let a = sample_plan(len, &cfg, seed).unwrap();
            prop_assert_eq!(&a, &sample_plan(len, &cfg, seed).unwrap());
            prop_assert_eq!(a.chunks.len(), k);
            let hw = a.half_width();
            prop_assert!(hw <= w);
            for c in &a.chunks {
                prop_assert_eq!(c.half_width, hw);
                prop_assert!(c.start <= c.end && c.end < len);
                prop_assert!(c.end - c.start <= 2 * hw);
                prop_assert!(c.frames().contains(&c.center));
                prop_assert_eq!(c.start, c.center.saturating_sub(hw));
                prop_assert_eq!(c.end, (c.center + hw).min(len - 1));
            }
        }

        #[test]
        fn frames_outside_zeroed_union_unchanged(
            len in 1usize..30, d in 1usize..4, seed in any::<u64>()
        ) {
            let f = ramp(len, d);
            let plan = sample_plan(len, &MaskConfig { k: 3, w: 4, zero_prob: 0.5 }, seed).unwrap();
            let out = apply_plan(&f, &plan).unwrap();
            for t in 0..len {
                let covered = plan.chunks.iter().any(|c| c.zeroed && c.frames().contains(&t));
                if covered {
                    prop_assert!(out.frames().row(t).iter().all(|&v| v == 0.0));
                } else {
                    prop_assert_eq!(out.frames().row(t), f.frames().row(t));
                }
            }
        }
    }
}
