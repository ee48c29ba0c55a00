use super::*;
use crate::numerics::{finite_diff_grad, max_relative_error, Tape, Tensor};
use crate::scm::Panel;

use super::model::{treatment_loss, unroll, Carry, TapedParams};

fn toy_panel(t: usize, k: usize, seed: u64) -> Panel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    Panel::new(
        Tensor::matrix(t, k, gen(t * k)).unwrap(),
        Tensor::matrix(t, k, gen(t * k)).unwrap(),
        gen(t),
        None,
    )
    .unwrap()
}

fn small_config(hidden: usize) -> FactorModelConfig {
    FactorModelConfig {
        hidden_dim: hidden,
        z_dim: 1,
        ..Default::default()
    }
}

#[test]
fn input_independent_cell_gives_constant_z() {
    let panel = toy_panel(6, 2, 1);
    let mut p = FactorModelParams::init(&small_config(3), 2, 2).unwrap();
    p.w_in = Tensor::zeros(p.w_in.shape());
    p.w_hh = Tensor::zeros(p.w_hh.shape());
    p.w_init = Tensor::zeros(p.w_init.shape());
    p.b_h = Tensor::row_vector(vec![0.2, -0.4, 0.9]);
    p.w_z = Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
    p.b_z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    let z = infer_z_sequence(&p, &panel).unwrap();
    for t in 0..panel.len() {
        assert_eq!(z.get(t, 0), 0.2f64.tanh());
    }
}

#[test]
fn three_step_hand_unroll() {
    // 2 hidden units, 1 covariate, 1 treatment, context of length 2.
    let cfg = small_config(2);
    let mut p = FactorModelParams::init(&cfg, 1, 1).unwrap();
    // input slots: [z, x, a, l1, l2]
    p.w_in = Tensor::matrix(5, 2, vec![0.5, -0.3, 0.2, 0.1, -0.4, 0.6, 0.3, 0.2, -0.1, 0.7]).unwrap();
    p.w_hh = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    p.b_h = Tensor::row_vector(vec![0.05, -0.05]);
    p.w_init = Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 1.0]).unwrap();
    p.w_z = Tensor::matrix(2, 1, vec![0.8, -0.6]).unwrap();
    p.b_z = Tensor::matrix(1, 1, vec![0.1]).unwrap();
    p.context = Tensor::row_vector(vec![0.3, -0.2]);

    let xs = [0.7, -1.1, 0.4];
    let as_ = [0.2, 0.9, -0.5];
    let panel = Panel::new(
        Tensor::matrix(3, 1, xs.to_vec()).unwrap(),
        Tensor::matrix(3, 1, as_.to_vec()).unwrap(),
        vec![0.0; 3],
        None,
    )
    .unwrap();

    let (l1, l2) = (0.3, -0.2);
    let w = |r: usize, c: usize| p.w_in.get(r, c);
    let u = |r: usize, c: usize| p.w_hh.get(r, c);
    let h0 = [l1 * 1.0 + l2 * -0.5, l1 * 0.5 + l2 * 1.0];
    let step = |h: [f64; 2], z: f64, x: f64, a: f64| -> ([f64; 2], f64) {
        let inp = [z, x, a, l1, l2];
        let mut h_new = [0.0; 2];
        for c in 0..2 {
            let mut s = 0.0;
            for (r, v) in inp.iter().enumerate() {
                s += v * w(r, c);
            }
            s += h[0] * u(0, c) + h[1] * u(1, c);
            s += [0.05, -0.05][c];
            h_new[c] = s.tanh();
        }
        let z_new = h_new[0] * 0.8 + h_new[1] * -0.6 + 0.1;
        (h_new, z_new)
    };
    let (h1, z1) = step(h0, 0.0, 0.0, 0.0);
    let (h2, z2) = step(h1, z1, xs[0], as_[0]);
    let (_, z3) = step(h2, z2, xs[1], as_[1]);

    let z = infer_z_sequence(&p, &panel).unwrap();
    for (got, want) in z.data().iter().zip([z1, z2, z3]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_head_weights_return_bias() {
    let mut p = FactorModelParams::init(&small_config(3), 3, 3).unwrap();
    for (j, head) in p.heads.iter_mut().enumerate() {
        head.weight = Tensor::zeros(head.weight.shape());
        head.bias = Tensor::matrix(1, 1, vec![j as f64 + 0.5]).unwrap();
    }
    let out = predict_treatments(&p, &[9.0, -3.0, 2.0], &[4.0]).unwrap();
    assert_eq!(out, vec![0.5, 1.5, 2.5]);
}

#[test]
fn changing_one_head_leaves_others_alone() {
    let p = FactorModelParams::init(&small_config(3), 3, 4).unwrap();
    let x = [0.3, -0.2, 1.0];
    let z = [0.7];
    let before = predict_treatments(&p, &x, &z).unwrap();
    let mut q = p.clone();
    q.heads[1].weight = q.heads[1].weight.map(|v| v * 3.0 + 1.0);
    q.heads[1].bias = Tensor::matrix(1, 1, vec![5.0]).unwrap();
    let after = predict_treatments(&q, &x, &z).unwrap();
    for j in [0, 2, 3] {
        assert_eq!(before[j], after[j]);
    }
    assert_ne!(before[1], after[1]);
}

#[test]
fn heads_have_exactly_zero_cross_gradients() {
    let panel = toy_panel(5, 3, 2);
    let p = FactorModelParams::init(&small_config(4), 3, 3).unwrap();
    let xs: Vec<Vec<f64>> = (0..5).map(|t| panel.x().row(t).to_vec()).collect();
    let as_: Vec<Vec<f64>> = (0..5).map(|t| panel.a().row(t).to_vec()).collect();
    for j in 0..3 {
        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, &p, true);
        let out = unroll(&mut tape, &tp, &p, &xs, &as_, Carry::Start).unwrap();
        let single: Vec<Vec<_>> = out.preds.iter().map(|s| vec![s[j]]).collect();
        let targets: Vec<Vec<f64>> = as_.iter().map(|r| vec![r[j]]).collect();
        let loss = treatment_loss(&mut tape, &single, &targets).unwrap();
        let g = tape.backward(loss).unwrap();
        for i in 0..3 {
            let (w, b) = tp.head(i);
            let gw = g.wrt(w).unwrap();
            let gb = g.wrt(b).unwrap();
            if i == j {
                assert!(gw.max_abs() > 0.0);
            } else {
                assert!(gw.data().iter().all(|&v| v == 0.0));
                assert!(gb.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let panel = toy_panel(5, 2, 100 + seed);
        let cfg = FactorModelConfig {
            hidden_dim: 3,
            seed,
            ..Default::default()
        };
        let p = FactorModelParams::init(&cfg, 2, 2).unwrap();
        let (_, grads) = factor_loss_and_grad(&p, &panel).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        let numeric = finite_diff_grad(|flat| factor_loss(&p.with_flat(flat)?, &panel), &p.flatten(), 1e-5).unwrap();
        let err = max_relative_error(&analytic, numeric.data());
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let p = FactorModelParams::init(&small_config(3), 2, 2).unwrap();
    assert!(infer_z_sequence(&p, &toy_panel(4, 3, 0)).is_err());
    assert!(predict_treatments(&p, &[1.0], &[0.0]).is_err());
}

#[test]
fn augment_adds_and_strips_channels() {
    let panel = toy_panel(8, 5, 3);
    let z = Tensor::matrix(8, 1, (0..8).map(|v| v as f64).collect()).unwrap();
    let aug = augment_panel(&panel, &z).unwrap();
    assert_eq!(aug.n_covariate_channels(), 6);
    assert_eq!(aug.strip(), panel);
    assert_eq!(aug.source(), ConfounderSource::Learned);
    assert!(augment_panel(&panel, &Tensor::zeros(&[7, 1])).is_err());
}

#[test]
fn augment_with_truth_requires_synthetic_panel() {
    let panel = toy_panel(8, 2, 3);
    assert!(augment_with_truth(&panel).is_err());
    let synthetic = Panel::new(
        panel.x().clone(),
        panel.a().clone(),
        panel.y().to_vec(),
        Some((0..8).map(|v| v as f64).collect()),
    )
    .unwrap();
    let aug = augment_with_truth(&synthetic).unwrap();
    assert_eq!(aug.source(), ConfounderSource::Oracle);
    assert_eq!(aug.confounder().column(0), synthetic.z_true().unwrap());
}

#[test]
fn params_json_round_trip() {
    let p = FactorModelParams::init(&small_config(4), 3, 2).unwrap();
    let json = p.to_json().unwrap();
    assert!(json.contains("\"head_2.bias\""));
    assert_eq!(FactorModelParams::from_json(&json).unwrap(), p);
}

#[test]
fn config_validation() {
    let bad = FactorModelConfig {
        hidden_dim: 1,
        z_dim: 2,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = FactorModelConfig {
        window_len: 1,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn training_rejects_short_panels() {
    let panel = toy_panel(10, 2, 0);
    let cfg = FactorModelConfig {
        window_len: 16,
        ..Default::default()
    };
    assert!(train_factor_model(&panel, &panel, &cfg).is_err());
}

#[test]
fn r2_is_undefined_for_constant_treatment() {
    let mut panel = toy_panel(40, 2, 5);
    let mut a = panel.a().clone();
    for t in 0..40 {
        a.set(t, 1, 3.0);
    }
    panel = panel.with_treatments(a).unwrap();
    let p = FactorModelParams::init(&small_config(3), 2, 2).unwrap();
    let r2 = treatment_r2(&p, &panel).unwrap();
    assert!(r2[0].is_some());
    assert!(r2[1].is_none());
}
