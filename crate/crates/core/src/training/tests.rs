use super::*;
use crate::dataset::{fit_normalize, make_windows, split_train_val, SynthSpec, DEFAULT_NORM_EPS};
use crate::model::ModelConfig;

fn data(len: usize) -> (WindowBatch, WindowBatch) {
    let raw = SynthSpec {
        length: len,
        dims: 2,
        seed: 4,
        train_len: None,
        ..SynthSpec::default()
    }
    .generate()
    .unwrap();
    let (series, _) = fit_normalize(&raw, DEFAULT_NORM_EPS).unwrap();
    split_train_val(&make_windows(&series, 4, 8).unwrap(), 0.8).unwrap()
}

fn state() -> ModelState {
    let cfg = ModelConfig {
        k: 4,
        l_ctx: 8,
        ff_hidden: 16,
        ..ModelConfig::new(2)
    };
    ModelState::new(cfg, 1).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rates_leave_parameters_untouched() {
    let (train, val) = data(120);
    let mut s = state();
    let before = s.params.flatten();
    let cfg = TrainConfig {
        lr: 0.0,
        meta_lr: 0.0,
        ..cfg()
    };
    fit(&mut s, &train, &val, &cfg).unwrap();
    let after = s.params.flatten();
    assert!(before
        .iter()
        .zip(&after)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn loss_falls_over_epochs() {
    let (train, val) = data(300);
    let mut s = state();
    let report = fit(
        &mut s,
        &train,
        &val,
        &TrainConfig {
            early_stop_patience: 10,
            ..cfg()
        },
    )
    .unwrap();
    assert_eq!(report.epochs.len(), 3);
    let (first, last) = (&report.epochs[0], &report.epochs[2]);
    assert!(last.mean_l1 < first.mean_l1, "{first:?} -> {last:?}");
    assert!(report.epochs.iter().all(|e| e.val_score.is_some()));
}

#[test]
fn single_epoch_report() {
    let (train, val) = data(80);
    let mut s = state();
    let report = fit(&mut s, &train, &val, &TrainConfig { epochs: 1, ..cfg() }).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.final_epoch, 1);
    assert_eq!(report.best_epoch, 1);
    assert_eq!(report.stop_reason, StopReason::Completed);
}

#[test]
fn training_is_deterministic() {
    let (train, val) = data(120);
    let run = || {
        let mut s = state();
        let report = fit(&mut s, &train, &val, &cfg()).unwrap();
        (s.params.flatten(), toml::to_string(&report).unwrap())
    };
    assert!(run() == run());
}

#[test]
fn thread_count_does_not_change_results() {
    let (train, val) = data(120);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let mut s = state();
            fit(&mut s, &train, &val, &cfg()).unwrap();
            s.params.flatten()
        })
    };
    assert!(run(1) == run(4));
}

#[test]
fn early_stopping_rule() {
    let mut stop = EarlyStopping::new(2);
    assert_eq!(stop.observe(1.0), StopDecision::Improved);
    assert_eq!(stop.observe(1.0), StopDecision::Continue);
    assert_eq!(stop.observe(0.5), StopDecision::Improved);
    assert_eq!(stop.observe(0.7), StopDecision::Continue);
    assert_eq!(stop.observe(0.6), StopDecision::Stop);
}

#[test]
fn early_stop_restores_best_weights() {
    let (train, val) = data(120);
    // a huge step makes validation worse after the first epoch
    let cfg = TrainConfig {
        epochs: 6,
        lr: 5.0,
        early_stop_patience: 1,
        use_maml: false,
        lr_step_epochs: 0,
        ..cfg()
    };
    let mut s = state();
    let report = fit(&mut s, &train, &val, &cfg).unwrap();
    let best = report.best_epoch;
    let best_score = report.epochs[best - 1].val_score.unwrap();
    assert!(report
        .epochs
        .iter()
        .all(|e| e.val_score.unwrap() >= best_score));
    if report.stop_reason == StopReason::EarlyStopped {
        assert_eq!(report.final_epoch, best + 1);
    }
    assert!((validation_score(&s, &val).unwrap() - best_score).abs() < 1e-12);
}

#[test]
fn ablations_train() {
    let (train, val) = data(100);
    for (sc, adv, maml) in [
        (false, true, true),
        (true, false, true),
        (true, true, false),
        (false, false, false),
    ] {
        let mut s = state();
        let cfg = TrainConfig {
            epochs: 2,
            use_self_condition: sc,
            use_adversarial: adv,
            use_maml: maml,
            ..cfg()
        };
        let report = fit(&mut s, &train, &val, &cfg).unwrap();
        assert_eq!(s.config.self_condition, sc);
        assert!(report.epochs.iter().all(|e| e.mean_l1.is_finite()));
    }
}

#[test]
fn iteration_semantics_and_second_order_run() {
    let (train, val) = data(100);
    let mut s = state();
    let cfg = TrainConfig {
        epochs: 1,
        n_semantics: NSemantics::Iteration,
        maml_order: MamlOrder::Second,
        ..cfg()
    };
    fit(&mut s, &train, &val, &cfg).unwrap();
}

#[test]
fn routing_sends_each_loss_to_its_decoder() {
    let (train, _) = data(40);
    let s = state();
    let mut rng = rng_indexed(0, "t", 0, 0);
    let wg = window_gradients(
        &s,
        &train.windows[5],
        &train.contexts[5],
        1,
        &cfg(),
        false,
        &mut rng,
    )
    .unwrap();
    let g = Graph::new();
    let p = s.bind(&g);
    let (l1, l2) = window_losses(
        &s,
        &g,
        &p,
        &train.windows[5],
        &train.contexts[5],
        1,
        &cfg(),
        false,
        &mut rng,
    )
    .unwrap();
    let g1 = s.params.collect_grads(&p, &g.backward(l1).unwrap());
    let g2 = s.params.collect_grads(&p, &g.backward(l2).unwrap());
    for i in 0..s.params.len() {
        let expected: Vec<f64> = match param_group(s.params.name(i)) {
            ParamGroup::Decoder1 => g1[i].clone(),
            ParamGroup::Decoder2 => g2[i].clone(),
            ParamGroup::Shared => g1[i].iter().zip(&g2[i]).map(|(a, b)| a + b).collect(),
        };
        assert_eq!(wg.grads[i], expected, "{}", s.params.name(i));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(TrainConfig {
        epsilon: 1.0,
        ..cfg()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..cfg()
    }
    .validate()
    .is_err());
    assert!(TrainConfig { lr: -1.0, ..cfg() }.validate().is_err());
}
