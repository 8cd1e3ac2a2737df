//! Training objectives evaluated outside the recorded graph. The graph
//! versions ([`Graph::weighted_sq_error`](crate::nnet::Graph::weighted_sq_error),
//! [`Graph::smoothed_nll`](crate::nnet::Graph::smoothed_nll)) compute the
//! same quantities.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::MaskPlan;
use crate::nnet::graph_values;

/// Per-frame multiplicity: how many chunks of `plan` contain each frame.
pub fn chunk_weights(plan: &MaskPlan) -> Vec<f64> {
    let mut w = vec![0.0; plan.len];
    for c in &plan.chunks {
        for t in c.frames() {
            w[t] += 1.0;
        }
    }
    w
}

/// `1/(B·K) · Σ_b Σ_i Σ_{t ∈ f_i} ‖x_{b,t} − x̂_{b,t}‖²`.
///
/// Frames covered by several chunks are counted once per chunk; frames
/// outside every chunk do not contribute. `K` is taken from the plans, which
/// must all have the same chunk count.
pub fn masked_mse_loss(x: &[Array2<f64>], x_hat: &[Array2<f64>], plans: &[MaskPlan]) -> Result<f64> {
    let b = x.len();
    if b == 0 {
        return Err(Error::invalid("masked MSE over an empty batch"));
    }
    if x_hat.len() != b || plans.len() != b {
        return Err(Error::shape(format!(
            "batch of {b} targets, {} predictions, {} plans",
            x_hat.len(),
            plans.len()
        )));
    }
    let k = plans[0].chunks.len();
    if plans.iter().any(|p| p.chunks.len() != k) {
        return Err(Error::invalid("plans in one batch must share the chunk count K"));
    }
    let mut total = 0.0;
    for ((xb, hb), plan) in x.iter().zip(x_hat).zip(plans) {
        if xb.dim() != hb.dim() {
            return Err(Error::shape(format!("target {:?} vs prediction {:?}", xb.dim(), hb.dim())));
        }
        if plan.len != xb.nrows() {
            return Err(Error::shape(format!("plan for {} frames, features have {}", plan.len, xb.nrows())));
        }
        total += graph_values::weighted_sq_error(hb, xb, &chunk_weights(plan));
    }
    Ok(total / (b * k) as f64)
}

/// Mean over non-pad positions of `−Σ_v q_v · logp_v` where
/// `q = (1 − ε)·onehot(target) + ε/V`.
pub fn smoothed_ce_loss(logprobs: &Array2<f64>, targets: &[usize], eps_ls: f64, pad_id: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&eps_ls) {
        return Err(Error::invalid(format!("label smoothing {eps_ls} outside [0, 1)")));
    }
    if logprobs.nrows() != targets.len() {
        return Err(Error::shape(format!("{} positions, {} targets", logprobs.nrows(), targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logprobs.ncols()) {
        return Err(Error::invalid(format!("target {t} outside vocabulary of {}", logprobs.ncols())));
    }
    let mask: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t)).collect();
    let n = mask.iter().flatten().count();
    if n == 0 {
        return Err(Error::invalid("every target position is padding"));
    }
    Ok(graph_values::smoothed_nll(logprobs, &mask, eps_ls) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskChunk;
    use ndarray::Array2;
    use rand::Rng as _;

    #[test]
    fn single_frame_all_ones_gives_dim() {
        let mut x = Array2::zeros((3, 320));
        x.row_mut(0).fill(1.0);
        let xh = Array2::zeros((3, 320));
        let plan = MaskPlan::from_parts(3, 0, &[0], &[true]).unwrap();
        assert_eq!(masked_mse_loss(&[x], &[xh], &[plan]).unwrap(), 320.0);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let x = Array2::from_elem((5, 2), 3.0);
        let plan = MaskPlan::from_parts(5, 2, &[1, 3], &[true, false]).unwrap();
        assert_eq!(masked_mse_loss(&[x.clone()], &[x], &[plan]).unwrap(), 0.0);
    }

    #[test]
    fn overlaps_count_per_chunk() {
        let x = Array2::ones((8, 1));
        let xh = Array2::zeros((8, 1));
        let plan = MaskPlan {
            chunks: vec![
                MaskChunk { center: 3, half_width: 2, start: 2, end: 5, zeroed: true },
                MaskChunk { center: 5, half_width: 2, start: 4, end: 7, zeroed: true },
            ],
            len: 8,
            seed: 0,
        };
        // 8 (chunk, frame) pairs, each error 1, divided by B·K = 2
        assert_eq!(masked_mse_loss(&[x], &[xh], &[plan]).unwrap(), 4.0);
    }

    #[test]
    fn mismatches_rejected() {
        let x = Array2::ones((4, 1));
        let plan = MaskPlan::from_parts(5, 0, &[0], &[true]).unwrap();
        assert!(masked_mse_loss(&[x.clone()], &[x.clone()], &[plan]).is_err());
        assert!(masked_mse_loss(&[], &[], &[]).is_err());
    }

    #[test]
    fn uniform_prediction_gives_log_v() {
        let lp = Array2::from_elem((3, 4), (0.25f64).ln());
        let loss = smoothed_ce_loss(&lp, &[1, 3, 0], 0.1, 0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_one_hot_without_smoothing() {
        let floor = -1e30;
        let lp = Array2::from_shape_fn((2, 3), |(i, j)| if j == i + 1 { 0.0 } else { floor });
        assert_eq!(smoothed_ce_loss(&lp, &[1, 2], 0.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn all_pad_rejected() {
        let lp = Array2::from_elem((2, 4), (0.25f64).ln());
        assert!(smoothed_ce_loss(&lp, &[0, 0], 0.1, 0).is_err());
        assert!(smoothed_ce_loss(&lp, &[1, 2], 1.0, 0).is_err());
    }

    #[test]
    fn matches_direct_summation() {
        let mut r = crate::rng::rng_from(3);
        let (l, v, eps) = (6, 7, 0.1);
        let logits = Array2::from_shape_simple_fn((l, v), || r.random_range(-3.0..3.0));
        let lp = Array2::from_shape_fn((l, v), |(i, j)| {
            let z: f64 = logits.row(i).iter().map(|x| f64::exp(*x)).sum();
            logits[[i, j]] - z.ln()
        });
        let targets = [3, 0, 6, 2, 0, 5];
        let mut sum = 0.0;
        let mut n = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == 0 {
                continue;
            }
            n += 1;
            for j in 0..v {
                let q = if j == t { 1.0 - eps + eps / v as f64 } else { eps / v as f64 };
                sum -= q * lp[[i, j]];
            }
        }
        let expected = sum / n as f64;
        assert!((smoothed_ce_loss(&lp, &targets, eps, 0).unwrap() - expected).abs() < 1e-12);
    }
}
