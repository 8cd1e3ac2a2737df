use ndarray::{s, Array2};

use super::*;
use crate::vocab::BOS_ID;

fn features(t: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::rng_from(seed);
    Array2::from_shape_simple_fn((t, d), || r.random_range(-1.0..1.0))
}

fn tiny() -> ModelConfig {
    ModelConfig::tiny(6, 5)
}

#[test]
fn single_frame_shape() {
    let cfg = tiny();
    let p = init_params(&cfg, 1).unwrap();
    let h = encode(&cfg, &p, "u", &features(1, 6, 2), &[false]).unwrap();
    assert_eq!(h.dim(), (1, 8));
    assert!(h.iter().all(|v| v.is_finite()));
}

#[test]
fn rejects_non_finite_input_naming_the_utterance() {
    let cfg = tiny();
    let p = init_params(&cfg, 1).unwrap();
    let mut x = features(3, 6, 2);
    x[[1, 4]] = f64::NAN;
    let err = encode(&cfg, &p, "utt-17", &x, &[false; 3]).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("utt-17")));
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = ModelConfig { positional: false, ..tiny() };
    let p = init_params(&cfg, 3).unwrap();
    let x = features(2, 6, 4);
    let mut xs = x.clone();
    xs.row_mut(0).assign(&x.row(1));
    xs.row_mut(1).assign(&x.row(0));
    let h = encode(&cfg, &p, "a", &x, &[false; 2]).unwrap();
    let hs = encode(&cfg, &p, "b", &xs, &[false; 2]).unwrap();
    for j in 0..8 {
        assert!((h[[0, j]] - hs[[1, j]]).abs() < 1e-12);
        assert!((h[[1, j]] - hs[[0, j]]).abs() < 1e-12);
    }
}

#[test]
fn padded_frames_do_not_influence_real_frames() {
    let cfg = ModelConfig { enc_layers: 2, ..tiny() };
    let p = init_params(&cfg, 5).unwrap();
    let x = features(3, 6, 6);
    let mut padded = Array2::from_elem((5, 6), 7.5);
    padded.slice_mut(s![..3, ..]).assign(&x);
    let h = encode(&cfg, &p, "a", &x, &[false; 3]).unwrap();
    let hp = encode(&cfg, &p, "a", &padded, &[false, false, false, true, true]).unwrap();
    for (a, b) in h.iter().zip(hp.slice(s![..3, ..]).iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn reconstruction_head() {
    let cfg = ModelConfig { input_dim: 320, ..tiny() };
    let p = init_acoustic_params(&cfg, 1).unwrap();
    let h = features(4, 8, 2);
    assert_eq!(reconstruct(&cfg, &p, &h).unwrap().dim(), (4, 320));

    let mut zero = p.clone();
    zero.get_mut("head.w").unwrap().fill(0.0);
    let b = Array2::from_shape_fn((1, 320), |(_, j)| j as f64 * 0.01);
    zero.insert("head.b", b.clone());
    let out = reconstruct(&cfg, &zero, &h).unwrap();
    for row in out.rows() {
        assert_eq!(row, b.row(0));
    }

    let mut pb = p.clone();
    pb.insert("head.b", b.clone());
    let h2 = features(4, 8, 3);
    let lhs = reconstruct(&cfg, &pb, &(&h + &h2)).unwrap();
    let rhs = reconstruct(&cfg, &pb, &h).unwrap() + reconstruct(&cfg, &pb, &h2).unwrap() - &b;
    assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn reconstruct_without_head_is_a_mode_error() {
    let cfg = tiny();
    let p = init_params(&cfg, 1).unwrap();
    assert!(matches!(reconstruct(&cfg, &p, &features(2, 8, 1)), Err(Error::Mode(_))));
}

#[test]
fn decode_step_is_normalized() {
    let cfg = tiny();
    let p = init_params(&cfg, 9).unwrap();
    let h = encode(&cfg, &p, "u", &features(4, 6, 1), &[false; 4]).unwrap();
    for prefix in [vec![BOS_ID], vec![BOS_ID, 4, 0, 3]] {
        let lp = decode_step(&cfg, &p, &h, &[false; 4], &prefix).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(lp.iter().all(|&v| v <= 0.0));
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = ModelConfig { dec_layers: 2, ..tiny() };
    let p = init_params(&cfg, 4).unwrap();
    let h = encode(&cfg, &p, "u", &features(4, 6, 1), &[false; 4]).unwrap();
    let full = [BOS_ID, 4, 1, 3, 0];
    let mut net = Net::new(&cfg, &p);
    let hn = net.graph_mut().constant(h.clone());
    let lp = net.decode(hn, &[false; 4], &full).unwrap();
    let all = net.value(lp).clone();
    for k in 1..=full.len() {
        let step = decode_step(&cfg, &p, &h, &[false; 4], &full[..k]).unwrap();
        for (a, b) in step.iter().zip(all.row(k - 1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_softmax_layer_gives_uniform_distribution() {
    let cfg = ModelConfig::tiny(6, 4);
    let mut p = init_params(&cfg, 1).unwrap();
    p.get_mut(SOFTMAX_EMBED).unwrap().fill(0.0);
    let h = features(2, 8, 1);
    let lp = decode_step(&cfg, &p, &h, &[false; 2], &[BOS_ID]).unwrap();
    for v in lp {
        assert!((v - 0.25f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn out_of_vocabulary_token_rejected() {
    let cfg = tiny();
    let p = init_params(&cfg, 1).unwrap();
    let h = features(2, 8, 1);
    assert!(decode_step(&cfg, &p, &h, &[false; 2], &[BOS_ID, 5]).is_err());
}

#[test]
fn frozen_encoder_keyset() {
    let cfg = tiny();
    let p = init_params(&cfg, 1).unwrap();
    let mut net = Net::new(&cfg, &p).freeze_encoder();
    let h = net.encode("u", &features(3, 6, 1), &[false; 3]).unwrap();
    let lp = net.decode(h, &[false; 3], &[BOS_ID, 4]).unwrap();
    let loss = net.graph_mut().smoothed_nll(lp, vec![Some(4), Some(3)], 0.1);
    let g = net.backward(loss).unwrap();
    assert!(g.keys().all(|k| !is_encoder_key(k)));
    let dec: Vec<&str> = p.keys().filter(|k| is_decoder_key(k)).collect();
    assert_eq!(g.keys().collect::<Vec<_>>(), dec);
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = tiny();
    assert_eq!(init_params(&cfg, 11).unwrap(), init_params(&cfg, 11).unwrap());
    assert_ne!(init_params(&cfg, 11).unwrap(), init_params(&cfg, 12).unwrap());
    let full = init_parts(&cfg, Parts::ALL, 11).unwrap();
    let acoustic = init_acoustic_params(&cfg, 11).unwrap();
    for (k, v) in acoustic.iter() {
        assert_eq!(full.get(k).unwrap(), v);
    }
}

#[test]
fn reinit_softmax_touches_only_softmax() {
    let cfg = ModelConfig { vocab_size: 3965, ..tiny() };
    let p = init_params(&cfg, 1).unwrap();
    let q = reinit_softmax(&p, &cfg, 4234, 99).unwrap();
    assert_eq!(q.get(SOFTMAX_EMBED).unwrap().dim(), (4234, 8));
    assert_eq!(q.get(SOFTMAX_BIAS).unwrap().dim(), (1, 4234));
    for (k, v) in p.iter().filter(|(k, _)| !is_softmax_key(k)) {
        let w = q.get(k).unwrap();
        assert!(v.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{k} changed");
    }
    assert_eq!(p.len(), q.len());
    assert_eq!(q, reinit_softmax(&p, &cfg, 4234, 99).unwrap());
}

#[test]
fn parameter_count_matches_closed_form() {
    for norm in [NormPlacement::Post, NormPlacement::Pre] {
        for (e, d) in [(1, 1), (2, 3), (0, 1)] {
            let cfg = ModelConfig { enc_layers: e, dec_layers: d, norm, ..ModelConfig::tiny(7, 11) };
            let p = init_params(&cfg, 0).unwrap();
            assert_eq!(p.numel(), cfg.seq2seq_param_count());
            let a = init_acoustic_params(&cfg, 0).unwrap();
            let enc = p.subset(is_encoder_key).numel();
            assert_eq!(a.numel(), enc + cfg.head_param_count());
        }
    }
    let full = ModelConfig::full_size();
    let by_shape: usize = param_shapes(&full, Parts::SEQ2SEQ).iter().map(|(_, (r, c))| r * c).sum();
    assert_eq!(by_shape, full.seq2seq_param_count());
    // 320·512+512 + 6·3_152_384 + 6·4_204_032 + 3965·512+3965
    assert_eq!(full.seq2seq_param_count(), 46_336_893);
}

/// Central differences at h = 1e-4 against the recorded-graph gradient.
#[test]
fn gradients_match_finite_differences() {
    for norm in [NormPlacement::Post, NormPlacement::Pre] {
        let cfg = ModelConfig { norm, ..tiny() };
        let mut p = init_parts(&cfg, Parts::ALL, 21).unwrap();
        // non-trivial norm gains and biases
        for (k, v) in p.iter_mut() {
            if k.ends_with(".b") || k.ends_with(".g") || k == SOFTMAX_BIAS {
                let mut r = rng::derived_rng(5, k, 0);
                v.mapv_inplace(|x| x + r.random_range(-0.3..0.3));
            }
        }
        let x = features(4, 6, 8);
        let loss_of = |params: &ModelParams| -> (f64, Option<Gradients>) {
            let mut net = Net::new(&cfg, params);
            let h = net.encode("u", &x, &[false; 4]).unwrap();
            let rec = net.reconstruct(h).unwrap();
            let g = net.graph_mut();
            let mse = g.weighted_sq_error(rec, x.clone(), vec![1.0, 0.0, 2.0, 1.0]);
            let lp = net.decode(h, &[false; 4], &[BOS_ID, 4, 0]).unwrap();
            let g = net.graph_mut();
            let ce = g.smoothed_nll(lp, vec![Some(0), Some(3), Some(4)], 0.1);
            let total = g.add(mse, ce);
            (g.scalar(total), Some(net.backward(total).unwrap()))
        };
        let (_, grads) = loss_of(&p);
        let grads = grads.unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), p.keys().collect::<Vec<_>>());
        let h = 1e-4;
        let mut worst = 0.0f64;
        for (name, value) in p.iter() {
            for idx in 0..value.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let analytic = grads.get(name).unwrap().as_slice().unwrap()[idx];
                // attention key biases have an exactly-zero gradient; FD returns round-off there
                let scale = analytic.abs().max(numeric.abs());
                let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale.max(1e-6) };
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "{norm:?}: worst relative error {worst:e}");
    }
}
