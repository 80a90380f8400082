//! Peaks-over-threshold: fit a Generalized Pareto Distribution to the
//! excesses over a high empirical quantile and extrapolate the score that is
//! exceeded with probability `q`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotConfig {
    /// Risk level q.
    pub q: f64,
    /// The initial threshold is the (1 − low_quantile) empirical quantile.
    pub low_quantile: f64,
    pub min_excesses: usize,
}

impl Default for PotConfig {
    fn default() -> Self {
        Self {
            q: 1e-4,
            low_quantile: 0.001,
            min_excesses: 10,
        }
    }
}

impl PotConfig {
    pub fn smap() -> Self {
        Self {
            low_quantile: 0.07,
            ..Self::default()
        }
    }

    pub fn msl() -> Self {
        Self {
            low_quantile: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.q && self.q < self.low_quantile && self.low_quantile < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < q < low_quantile < 1 (q={}, low_quantile={})",
                self.q, self.low_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Maximum likelihood via the Grimshaw reduction.
    Likelihood,
    /// Method of moments, used when the likelihood search fails.
    Moments,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub gamma: f64,
    pub sigma: f64,
    pub method: FitMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Pot,
    /// Every score equal: threshold is that value plus machine epsilon.
    ConstantScores,
    /// Too few excesses: threshold is max · (1 + 1e-6).
    TooFewExcesses,
}

/// Threshold of one dimension with every intermediate quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimThreshold {
    pub initial: f64,
    pub gpd: Option<GpdFit>,
    pub n_excess: usize,
    pub n: usize,
    pub threshold: f64,
    pub method: ThresholdMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub config: PotConfig,
    pub dims: Vec<DimThreshold>,
}

impl ThresholdModel {
    pub fn thresholds(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.threshold).collect()
    }
}

/// Empirical quantile at level 1 − `low_quantile`, interpolating linearly
/// between order statistics.
pub fn initial_threshold(scores: &[f64], low_quantile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * (1.0 - low_quantile);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn log_likelihood(y: &[f64], gamma: f64, sigma: f64) -> f64 {
    if !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let n = y.len() as f64;
    if gamma == 0.0 {
        return -n * sigma.ln() - y.iter().sum::<f64>() / sigma;
    }
    let mut acc = 0.0;
    for &v in y {
        let z = 1.0 + gamma * v / sigma;
        if z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += z.ln();
    }
    -n * sigma.ln() - (1.0 + 1.0 / gamma) * acc
}

/// Grimshaw's equation u(x)·v(x) − 1 with u = 1 + mean ln(1 + xY) and
/// v = mean 1/(1 + xY). Its nonzero roots give the likelihood stationary
/// points through γ = mean ln(1 + xY), σ = γ/x.
fn grimshaw(y: &[f64], x: f64) -> f64 {
    let n = y.len() as f64;
    let (mut u, mut v) = (0.0, 0.0);
    for &yi in y {
        let s = 1.0 + x * yi;
        u += s.ln();
        v += 1.0 / s;
    }
    (1.0 + u / n) * (v / n) - 1.0
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Roots of `f` on the grid points, refined by bisection between sign changes.
fn grid_roots(f: &impl Fn(f64) -> f64, mut grid: Vec<f64>) -> Vec<f64> {
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut roots = Vec::new();
    for i in 1..grid.len() {
        let (a, b) = (vals[i - 1], vals[i]);
        if a.is_finite() && b.is_finite() && a.signum() != b.signum() {
            if let Some(r) = bisect(f, grid[i - 1], grid[i]) {
                roots.push(r);
            }
        }
    }
    roots
}

/// Grid points per decade of the root search.
const GRID_DENSITY: f64 = 30.0;

fn geometric(from_exp: f64, to_exp: f64) -> impl Iterator<Item = f64> {
    let steps = ((to_exp - from_exp) * GRID_DENSITY).ceil().max(1.0) as usize;
    (0..=steps).map(move |i| 10f64.powf(from_exp + (to_exp - from_exp) * i as f64 / steps as f64))
}

/// Maximum-likelihood GPD fit of positive excesses. Falls back to the method
/// of moments when no likelihood candidate is valid.
pub fn fit_gpd(excesses: &[f64], min_excesses: usize) -> Result<GpdFit> {
    if excesses.len() < min_excesses.max(2) {
        return Err(Error::TooFewExcesses {
            found: excesses.len(),
            required: min_excesses.max(2),
        });
    }
    if let Some(bad) = excesses.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "excess {bad} is not positive"
        )));
    }
    let n = excesses.len() as f64;
    let y_max = excesses.iter().copied().fold(f64::MIN, f64::max);
    let y_min = excesses.iter().copied().fold(f64::MAX, f64::min);
    let mean = excesses.iter().sum::<f64>() / n;

    let f = |x: f64| grimshaw(excesses, x);
    let mut roots = Vec::new();
    // x < 0 lives in (−1/Ymax, 0); dense near both ends.
    let a = -1.0 / y_max;
    let neg: Vec<f64> = geometric(-10.0, 0.0)
        .flat_map(|s| [a * s, a * (1.0 - s)])
        .filter(|&x| x > a && x < 0.0)
        .collect();
    roots.extend(grid_roots(&f, neg));
    // Positive roots are bounded above by 2(Ȳ − Ymin)/Ymin².
    let upper = 2.0 * (mean - y_min) / (y_min * y_min);
    if upper.is_finite() && upper > 0.0 {
        let lo = (1e-8 / mean).log10().min(upper.log10() - 1.0);
        let pos: Vec<f64> = geometric(lo, upper.log10()).collect();
        roots.extend(grid_roots(&f, pos));
    }

    let mut best = GpdFit {
        gamma: 0.0,
        sigma: mean,
        method: FitMethod::Likelihood,
    };
    let mut best_ll = log_likelihood(excesses, 0.0, mean);
    for x in roots {
        let gamma = excesses.iter().map(|&v| (1.0 + x * v).ln()).sum::<f64>() / n;
        let sigma = gamma / x;
        let ll = log_likelihood(excesses, gamma, sigma);
        if ll > best_ll {
            best_ll = ll;
            best = GpdFit {
                gamma,
                sigma,
                method: FitMethod::Likelihood,
            };
        }
    }
    if best_ll.is_finite() && best.sigma > 0.0 && best.gamma.is_finite() {
        return Ok(best);
    }
    Ok(moments_fit(excesses))
}

/// γ = ½(1 − mean²/var), σ = ½·mean·(1 + mean²/var).
pub fn moments_fit(excesses: &[f64]) -> GpdFit {
    let n = excesses.len() as f64;
    let mean = excesses.iter().sum::<f64>() / n;
    let var = excesses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let ratio = mean * mean / var;
    GpdFit {
        gamma: 0.5 * (1.0 - ratio),
        sigma: 0.5 * mean * (1.0 + ratio),
        method: FitMethod::Moments,
    }
}

/// z_q = u + (σ/γ)·((q·n/N_u)^(−γ) − 1), or u − σ·ln(q·n/N_u) when |γ| < 1e-6.
pub fn final_threshold(
    initial: f64,
    gamma: f64,
    sigma: f64,
    n: usize,
    n_excess: usize,
    q: f64,
) -> f64 {
    let ratio = q * n as f64 / n_excess as f64;
    if gamma.abs() < 1e-6 {
        initial - sigma * ratio.ln()
    } else {
        initial + sigma / gamma * (-gamma * ratio.ln()).exp_m1()
    }
}

/// Fits the threshold of one dimension from its calibration scores.
pub fn pot_threshold(scores: &[f64], cfg: &PotConfig) -> Result<DimThreshold> {
    cfg.validate()?;
    let initial = initial_threshold(scores, cfg.low_quantile)?;
    let n = scores.len();
    let max = scores.iter().copied().fold(f64::MIN, f64::max);
    let min = scores.iter().copied().fold(f64::MAX, f64::min);
    let excesses: Vec<f64> = scores
        .iter()
        .filter(|&&s| s > initial)
        .map(|s| s - initial)
        .collect();
    let fallback = |threshold, method| DimThreshold {
        initial,
        gpd: None,
        n_excess: excesses.len(),
        n,
        threshold,
        method,
    };
    if max == min {
        return Ok(fallback(
            max + f64::EPSILON * max.abs().max(1.0),
            ThresholdMethod::ConstantScores,
        ));
    }
    if excesses.len() < cfg.min_excesses.max(2) {
        return Ok(fallback(
            max * (1.0 + 1e-6),
            ThresholdMethod::TooFewExcesses,
        ));
    }
    let fit = fit_gpd(&excesses, cfg.min_excesses)?;
    let z = final_threshold(initial, fit.gamma, fit.sigma, n, excesses.len(), cfg.q);
    Ok(DimThreshold {
        initial,
        gpd: Some(fit),
        n_excess: excesses.len(),
        n,
        threshold: z.max(initial),
        method: ThresholdMethod::Pot,
    })
}

/// Fits one threshold per dimension; `scores[t][i]` is dimension `i` at `t`.
pub fn fit_thresholds(scores: &[Vec<f64>], cfg: &PotConfig) -> Result<ThresholdModel> {
    let m = scores.first().map(Vec::len).ok_or(Error::EmptyInput)?;
    let dims = (0..m)
        .into_par_iter()
        .map(|i| {
            let column: Vec<f64> = scores.iter().map(|r| r[i]).collect();
            pot_threshold(&column, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdModel {
        config: cfg.clone(),
        dims,
    })
}
