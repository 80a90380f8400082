use super::*;
use crate::training::{window_losses, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(m: usize) -> ModelConfig {
    ModelConfig {
        k: 4,
        l_ctx: 8,
        ..ModelConfig::new(m)
    }
}

fn sample(rows: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * m).map(|_| rng.random()).collect()
}

#[test]
fn d_model_must_be_twice_m() {
    let cfg = ModelConfig {
        d_model: 5,
        ..ModelConfig::new(2)
    };
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    assert!(ModelConfig::new(3).validate().is_ok());
}

#[test]
fn outputs_are_bounded_and_shaped() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [1, 2, 3] {
        let state = ModelState::new(tiny(m), 5).unwrap();
        for rows in [1, 3, 4, 8] {
            let out = state
                .infer(&sample(4, m, &mut rng), &sample(rows, m, &mut rng), false)
                .unwrap();
            for t in [&out.o1, &out.o2, &out.o2_hat] {
                assert_eq!(t.shape(), &[4, m]);
                assert!(t.data().iter().all(|v| *v > 0.0 && *v < 1.0));
            }
            assert!(out.focus.data().iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (w, c) = (sample(4, 2, &mut rng), sample(8, 2, &mut rng));
    let a = ModelState::new(tiny(2), 9).unwrap();
    let b = ModelState::new(tiny(2), 9).unwrap();
    assert_eq!(a.params.flatten(), b.params.flatten());
    assert_eq!(
        a.infer(&w, &c, true).unwrap(),
        b.infer(&w, &c, true).unwrap()
    );
    let other = ModelState::new(tiny(2), 10).unwrap();
    assert_ne!(a.params.flatten(), other.params.flatten());
}

#[test]
fn window_encoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let state = ModelState::new(tiny(3), 4).unwrap();
    let cfg = &state.config;
    let context = sample(8, 3, &mut rng);
    let encode = |window: &[f64]| {
        let g = Graph::new();
        let p = state.bind_frozen(&g);
        let zero = g.constant_matrix(cfg.k, cfg.m, vec![0.0; cfg.k * cfg.m]);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let ctx = state
            .encode_context(&g, &p, &context, zero, false, &mut r)
            .unwrap();
        let w = g.constant_matrix(cfg.k, cfg.m, window.to_vec());
        let (enc, _, _) = state
            .encode_window(&g, &p, w, zero, ctx, false, &mut r)
            .unwrap();
        g.value(enc).to_rows()
    };
    let base_window = sample(4, 3, &mut rng);
    let base = encode(&base_window);
    for _ in 0..20 {
        let t = rng.random_range(0..cfg.k - 1);
        let mut w = base_window.clone();
        for v in &mut w[(t + 1) * cfg.m..] {
            *v += rng.random_range(-1.0..1.0);
        }
        let out = encode(&w);
        for row in 0..=t {
            for (a, b) in out[row].iter().zip(&base[row]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_ne!(out[cfg.k - 1], base[cfg.k - 1]);
    }
}

#[test]
fn attention_maps_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = ModelState::new(tiny(2), 1).unwrap();
    let out = state
        .infer(&sample(4, 2, &mut rng), &sample(6, 2, &mut rng), true)
        .unwrap();
    let maps = out.attention_maps.unwrap();
    assert_eq!(maps.window_self.len(), 2);
    for t in maps.window_self.iter().chain(&maps.cross) {
        for row in t.to_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    // masked: nothing above the diagonal
    for t in &maps.window_self {
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(t.get(i, j), 0.0);
            }
        }
    }
    assert_eq!(maps.cross[0].shape(), &[4, 6]);
    let mean = mean_of(&maps.cross).unwrap();
    assert_eq!(mean.shape(), &[4, 6]);
}

#[test]
fn zero_decoder_outputs_one_half() {
    let mut state = ModelState::new(tiny(2), 2).unwrap();
    for (name, t) in state.params.iter_mut() {
        if name.starts_with("decoder1.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = state
        .infer(&sample(4, 2, &mut rng), &sample(8, 2, &mut rng), false)
        .unwrap();
    assert!(out.o1.data().iter().all(|v| *v == 0.5));
}

#[test]
fn zero_focus_makes_phase_two_repeat_phase_one() {
    let cfg = ModelConfig {
        self_condition: false,
        ..tiny(2)
    };
    let state = ModelState::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = state
        .infer(&sample(4, 2, &mut rng), &sample(8, 2, &mut rng), false)
        .unwrap();
    assert_eq!(out.o2_hat, out.o2);
    assert!(out.focus.data().iter().all(|v| *v == 0.0));
}

#[test]
fn focus_is_the_squared_phase_one_error() {
    let state = ModelState::new(tiny(2), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = sample(4, 2, &mut rng);
    let out = state.infer(&w, &sample(8, 2, &mut rng), false).unwrap();
    for ((f, o), x) in out.focus.data().iter().zip(out.o1.data()).zip(&w) {
        assert_eq!(*f, (o - x) * (o - x));
    }
    assert_ne!(out.o2_hat, out.o2);
}

#[test]
fn context_encoding_depends_on_its_input() {
    let state = ModelState::new(tiny(2), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let encode = |context: &[f64]| {
        let g = Graph::new();
        let p = state.bind_frozen(&g);
        let zero = g.constant_matrix(4, 2, vec![0.0; 8]);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        g.data(
            state
                .encode_context(&g, &p, context, zero, false, &mut r)
                .unwrap(),
        )
    };
    let a = encode(&sample(8, 2, &mut rng));
    let b = encode(&sample(8, 2, &mut rng));
    assert_eq!(a.len(), 8 * 4);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn variants_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let variants = [
        ModelConfig {
            focus_target: FocusTarget::Window,
            ..tiny(2)
        },
        ModelConfig {
            scale_mode: ScaleMode::DataDim,
            activation: Activation::Sigmoid,
            ..tiny(2)
        },
        ModelConfig {
            n_enc_layers: 2,
            ff_layers: 3,
            n_heads: 1,
            ..tiny(2)
        },
    ];
    for cfg in variants {
        let state = ModelState::new(cfg, 1).unwrap();
        let out = state
            .infer(&sample(4, 2, &mut rng), &sample(5, 2, &mut rng), false)
            .unwrap();
        assert!(out.o2_hat.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn bad_shapes_are_rejected() {
    let state = ModelState::new(tiny(2), 1).unwrap();
    assert!(matches!(
        state.infer(&[0.0; 6], &[0.0; 8], false),
        Err(Error::ShapeMismatch(_))
    ));
    assert!(state.infer(&[0.0; 8], &[0.0; 7], false).is_err());
    assert!(state.infer(&[0.0; 8], &[], false).is_err());
}

fn losses(state: &ModelState, w: &[f64], c: &[f64]) -> (f64, f64) {
    let g = Graph::new();
    let p = state.bind_frozen(&g);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (l1, l2) = window_losses(
        state,
        &g,
        &p,
        w,
        c,
        1,
        &TrainConfig::default(),
        false,
        &mut r,
    )
    .unwrap();
    (g.scalar(l1), g.scalar(l2))
}

#[test]
fn every_parameter_receives_gradient() {
    let state = ModelState::new(tiny(2), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (w, c) = (sample(4, 2, &mut rng), sample(8, 2, &mut rng));
    let g = Graph::new();
    let p = state.bind(&g);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (l1, l2) = window_losses(
        &state,
        &g,
        &p,
        &w,
        &c,
        1,
        &TrainConfig::default(),
        false,
        &mut r,
    )
    .unwrap();
    let g1 = state.params.collect_grads(&p, &g.backward(l1).unwrap());
    let g2 = state.params.collect_grads(&p, &g.backward(l2).unwrap());
    for (i, (a, b)) in g1.iter().zip(&g2).enumerate() {
        let name = state.params.name(i);
        let used = match param_group(name) {
            ParamGroup::Decoder1 => a.clone(),
            ParamGroup::Decoder2 => b.clone(),
            ParamGroup::Shared => a.iter().zip(b).map(|(x, y)| x + y).collect(),
        };
        assert!(used.iter().any(|v| *v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut state = ModelState::new(tiny(2), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (w, c) = (sample(4, 2, &mut rng), sample(8, 2, &mut rng));
    let g = Graph::new();
    let p = state.bind(&g);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (l1, l2) = window_losses(
        &state,
        &g,
        &p,
        &w,
        &c,
        1,
        &TrainConfig::default(),
        false,
        &mut r,
    )
    .unwrap();
    let g1 = state.params.collect_grads(&p, &g.backward(l1).unwrap());
    let g2 = state.params.collect_grads(&p, &g.backward(l2).unwrap());
    let h = 1e-5;
    for i in 0..state.params.len() {
        // a spread of entries from every tensor
        let n = state.params.tensor(i).numel();
        for j in (0..n).step_by((n / 3).max(1)) {
            let orig = state.params.tensor(i).data()[j];
            state.params.tensor_mut(i).data_mut()[j] = orig + h;
            let plus = losses(&state, &w, &c);
            state.params.tensor_mut(i).data_mut()[j] = orig - h;
            let minus = losses(&state, &w, &c);
            state.params.tensor_mut(i).data_mut()[j] = orig;
            for (analytic, num) in [
                (g1[i][j], (plus.0 - minus.0) / (2.0 * h)),
                (g2[i][j], (plus.1 - minus.1) / (2.0 * h)),
            ] {
                let err = (analytic - num).abs() / analytic.abs().max(num.abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "{} [{j}]: {analytic} vs {num}",
                    state.params.name(i)
                );
            }
        }
    }
}
