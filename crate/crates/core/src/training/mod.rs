//! Two-phase adversarial training with an evolving loss weight, first-order
//! meta-learning, and early stopping on a held-out split.

mod loss;
mod maml;

pub use loss::{evolution_weights, loss_adversarial, loss_combined, loss_phase1};
pub use maml::{maml_update, MamlOrder};

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowBatch;
use crate::diffcore::{AdamWConfig, Graph, OptimizerState, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{param_group, ModelState, ParamGroup};
use crate::seed::rng_indexed;

/// What `n` counts in the ε⁻ⁿ weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NSemantics {
    /// Epoch index, starting at 1.
    Epoch,
    /// Optimizer step index, starting at 1.
    Iteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub meta_lr: f64,
    /// Base of the evolving weight ε⁻ⁿ; must exceed 1.
    pub epsilon: f64,
    pub seed: u64,
    pub use_self_condition: bool,
    pub use_adversarial: bool,
    pub use_maml: bool,
    pub maml_order: MamlOrder,
    pub early_stop_patience: usize,
    pub n_semantics: NSemantics,
    pub weight_decay: f64,
    /// Halve the learning rate every this many epochs; 0 disables.
    pub lr_step_epochs: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: 0.01,
            meta_lr: 0.02,
            epsilon: 1.05,
            seed: 0,
            use_self_condition: true,
            use_adversarial: true,
            use_maml: true,
            maml_order: MamlOrder::First,
            early_stop_patience: 3,
            n_semantics: NSemantics::Epoch,
            weight_decay: 1e-5,
            lr_step_epochs: 5,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.epsilon > 1.0) {
            return bad("epsilon must be > 1");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return bad("epochs, batch_size and early_stop_patience must be >= 1");
        }
        if !(self.lr >= 0.0 && self.meta_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub val_score: Option<f64>,
    pub lr: f64,
    /// Not serialized, so saved reports stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl EpochRecord {
    pub fn progress_line(&self) -> String {
        let val = self
            .val_score
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        format!(
            "epoch {} | L1 {:.6} | L2 {:.6} | val {val} | lr {:.6} | secs {:.2}",
            self.epoch, self.mean_l1, self.mean_l2, self.lr, self.wall_secs
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub final_epoch: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        if score < self.best {
            self.best = score;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Both training losses of one window, recorded on `g`.
#[allow(clippy::too_many_arguments)]
pub fn window_losses<R: rand::Rng + ?Sized>(
    state: &ModelState,
    g: &Graph,
    params: &[Var],
    window: &[f64],
    context: &[f64],
    n: u64,
    cfg: &TrainConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let out = state.forward(g, params, window, context, training, rng)?;
    let phase1 = loss_phase1(g, out.o1, out.o2, out.window)?;
    let adversarial = loss_adversarial(g, out.o2_hat, out.window)?;
    loss_combined(g, phase1, adversarial, n, cfg.epsilon, cfg.use_adversarial)
}

/// Losses and routed gradients of one window: decoder 1 follows L1,
/// decoder 2 follows L2, shared encoder parameters follow L1 + L2.
pub struct WindowGrad {
    pub l1: f64,
    pub l2: f64,
    pub grads: Vec<Vec<f64>>,
}

pub fn window_gradients<R: rand::Rng + ?Sized>(
    state: &ModelState,
    window: &[f64],
    context: &[f64],
    n: u64,
    cfg: &TrainConfig,
    training: bool,
    rng: &mut R,
) -> Result<WindowGrad> {
    let g = Graph::new();
    let params = state.bind(&g);
    let (l1, l2) = window_losses(state, &g, &params, window, context, n, cfg, training, rng)?;
    let g1 = state.params.collect_grads(&params, &g.backward(l1)?);
    let g2 = state.params.collect_grads(&params, &g.backward(l2)?);
    let grads = route(&state.params, g1, g2);
    Ok(WindowGrad {
        l1: g.scalar(l1),
        l2: g.scalar(l2),
        grads,
    })
}

fn route(params: &ParamStore, g1: Vec<Vec<f64>>, g2: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    g1.into_iter()
        .zip(g2)
        .enumerate()
        .map(|(i, (a, b))| match param_group(params.name(i)) {
            ParamGroup::Decoder1 => a,
            ParamGroup::Decoder2 => b,
            ParamGroup::Shared => a.iter().zip(&b).map(|(x, y)| x + y).collect(),
        })
        .collect()
}

/// Mean routed gradient over `positions` of `data`. Per-window work may run
/// in parallel; the reduction is in position order.
fn batch_gradients(
    state: &ModelState,
    data: &WindowBatch,
    positions: &[usize],
    n: u64,
    cfg: &TrainConfig,
    stream: (&str, u64),
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let parts: Vec<Result<WindowGrad>> = positions
        .par_iter()
        .map(|&p| {
            let mut rng = rng_indexed(cfg.seed, stream.0, stream.1, data.indices[p] as u64);
            window_gradients(
                state,
                &data.windows[p],
                &data.contexts[p],
                n,
                cfg,
                true,
                &mut rng,
            )
        })
        .collect();
    let scale = 1.0 / positions.len() as f64;
    let mut total: Vec<Vec<f64>> = state
        .params
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let (mut l1, mut l2) = (0.0, 0.0);
    for part in parts {
        let part = part?;
        l1 += part.l1;
        l2 += part.l2;
        for (acc, g) in total.iter_mut().zip(&part.grads) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    }
    total.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((l1 * scale, l2 * scale, total))
}

/// Mean of ½‖O1 − W‖ + ½‖Ô2 − W‖ over `data`, dropout off.
pub fn validation_score(state: &ModelState, data: &WindowBatch) -> Result<f64> {
    let scores: Vec<Result<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let out = state.infer(&data.windows[i], &data.contexts[i], false)?;
            let dev = |o: &crate::diffcore::Tensor| {
                o.data()
                    .iter()
                    .zip(&data.windows[i])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            Ok(0.5 * dev(&out.o1) + 0.5 * dev(&out.o2_hat))
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / data.len() as f64)
}

/// Statistics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub steps: u64,
}

/// One pass over `data`: a two-phase forward and one optimizer step per batch.
/// `step` is the global optimizer step count before the epoch.
pub fn train_epoch(
    state: &mut ModelState,
    data: &WindowBatch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    epoch: usize,
    step: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if cfg.shuffle {
        order.shuffle(&mut rng_indexed(cfg.seed, "shuffle", epoch as u64, 0));
    }
    let (mut sum1, mut sum2, mut steps) = (0.0, 0.0, 0);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let n = match cfg.n_semantics {
            NSemantics::Epoch => epoch as u64,
            NSemantics::Iteration => step + steps + 1,
        };
        let (l1, l2, grads) =
            batch_gradients(state, data, chunk, n, cfg, ("dropout", epoch as u64))?;
        if !(l1.is_finite() && l2.is_finite()) || grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, batch: b });
        }
        state.params.zero_grad();
        state.params.accumulate(&grads, 1.0);
        opt.step(&mut state.params)?;
        sum1 += l1 * chunk.len() as f64;
        sum2 += l2 * chunk.len() as f64;
        steps += 1;
    }
    Ok(EpochStats {
        mean_l1: sum1 / data.len() as f64,
        mean_l2: sum2 / data.len() as f64,
        steps,
    })
}

/// Meta step on a random batch drawn without replacement from `data`.
pub fn maml_step(
    state: &mut ModelState,
    data: &WindowBatch,
    cfg: &TrainConfig,
    epoch: usize,
    n: u64,
) -> Result<()> {
    if !cfg.use_maml || data.is_empty() {
        return Ok(());
    }
    let mut rng = rng_indexed(cfg.seed, "maml-batch", epoch as u64, 0);
    let mut positions: Vec<usize> = (0..data.len()).collect();
    positions.shuffle(&mut rng);
    positions.truncate(cfg.batch_size);
    positions.sort_unstable();
    let config = state.config.clone();
    let stream = ("maml-dropout", epoch as u64);
    let mut params = std::mem::take(&mut state.params);
    let result = maml_update(&mut params, cfg.lr, cfg.meta_lr, cfg.maml_order, |p| {
        let probe = ModelState::from_params(config.clone(), p.clone())?;
        let (_, _, grads) = batch_gradients(&probe, data, &positions, n, cfg, stream)?;
        Ok(grads)
    });
    state.params = params;
    result
}

/// Full training loop. Keeps the weights of the epoch with the best
/// validation score (the last epoch when there is no validation data).
pub fn fit(
    state: &mut ModelState,
    train: &WindowBatch,
    val: &WindowBatch,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    fit_with_progress(state, train, val, cfg, |_| {})
}

pub fn fit_with_progress(
    state: &mut ModelState,
    train: &WindowBatch,
    val: &WindowBatch,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySeries);
    }
    state.config.self_condition = cfg.use_self_condition;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        scheduler_interval: cfg.lr_step_epochs as u64 * steps_per_epoch,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(opt_cfg, &state.params);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = (state.params.clone(), 0usize);
    let mut records = Vec::new();
    let mut stop_reason = StopReason::Completed;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = opt.lr();
        let stats = train_epoch(state, train, cfg, &mut opt, epoch, step)?;
        step += stats.steps;
        let n = match cfg.n_semantics {
            NSemantics::Epoch => epoch as u64,
            NSemantics::Iteration => step,
        };
        maml_step(state, train, cfg, epoch, n)?;
        if state.params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: steps_per_epoch as usize,
            });
        }
        let val_score = if val.is_empty() {
            None
        } else {
            Some(validation_score(state, val)?)
        };
        let record = EpochRecord {
            epoch,
            mean_l1: stats.mean_l1,
            mean_l2: stats.mean_l2,
            val_score,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        progress(&record);
        records.push(record);
        match val_score.map(|v| stopper.observe(v)) {
            None | Some(StopDecision::Improved) => best = (state.params.clone(), epoch),
            Some(StopDecision::Continue) => {}
            Some(StopDecision::Stop) => {
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let final_epoch = records.len();
    state.params = best.0;
    Ok(TrainReport {
        epochs: records,
        stop_reason,
        final_epoch,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests;
