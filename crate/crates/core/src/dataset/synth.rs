use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Short excursion with a random sign.
    Spike,
    /// Constant offset for the whole segment.
    LevelShift,
    /// Excursion whose per-step magnitude is shared by all affected dimensions.
    Burst,
}

/// One injected anomaly. `magnitude` is in units of the affected dimension's
/// standard deviation before injection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub length: usize,
    pub dims: Vec<usize>,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
}

/// Randomly placed anomalies covering `fraction` of the timestamps at or
/// after `start_after`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomAnomalies {
    pub fraction: f64,
    pub start_after: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    /// Minimum number of clean timestamps between two anomalies.
    pub gap: usize,
}

impl Default for RandomAnomalies {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            start_after: 0,
            min_length: 1,
            max_length: 5,
            min_magnitude: 4.0,
            max_magnitude: 8.0,
            gap: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub dims: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub sinusoids: Vec<Sinusoid>,
    pub anomalies: Vec<AnomalySpec>,
    pub random_anomalies: Option<RandomAnomalies>,
    /// When set, the series is also written as a train prefix and test suffix.
    pub train_len: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 2000,
            dims: 3,
            seed: 0,
            noise_sigma: 0.05,
            sinusoids: vec![
                Sinusoid {
                    amplitude: 1.0,
                    period: 50.0,
                },
                Sinusoid {
                    amplitude: 0.5,
                    period: 13.0,
                },
            ],
            anomalies: Vec::new(),
            random_anomalies: Some(RandomAnomalies {
                start_after: 1000,
                ..Default::default()
            }),
            train_len: Some(1000),
        }
    }
}

fn check_bounds(spec: &SynthSpec, a: &AnomalySpec) -> Result<()> {
    if a.length == 0 || a.start + a.length > spec.length {
        return Err(Error::InvalidConfig(format!(
            "anomaly at {}..{} outside series of length {}",
            a.start,
            a.start + a.length,
            spec.length
        )));
    }
    if a.dims.is_empty() || a.dims.iter().any(|&d| d >= spec.dims) {
        return Err(Error::InvalidConfig(format!(
            "anomaly dimensions {:?} invalid for {} dims",
            a.dims, spec.dims
        )));
    }
    Ok(())
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.length == 0 || self.dims == 0 {
            return Err(Error::EmptySeries);
        }
        if !(self.noise_sigma >= 0.0) || self.sinusoids.iter().any(|s| !(s.period > 0.0)) {
            return Err(Error::InvalidConfig(
                "noise and periods must be positive".into(),
            ));
        }
        if let Some(r) = &self.random_anomalies {
            if r.min_length == 0 || r.min_length > r.max_length || r.min_magnitude > r.max_magnitude
            {
                return Err(Error::InvalidConfig("invalid random anomaly ranges".into()));
            }
        }
        Ok(())
    }

    /// Explicit anomalies followed by the generated ones.
    pub fn resolved_anomalies(&self) -> Result<Vec<AnomalySpec>> {
        self.validate()?;
        let mut all = self.anomalies.clone();
        for a in &all {
            check_bounds(self, a)?;
        }
        let Some(r) = &self.random_anomalies else {
            return Ok(all);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x0061_6e6f_6d61_6c79);
        let span = self.length.saturating_sub(r.start_after);
        let target = (r.fraction * span as f64).round() as usize;
        let mut busy = vec![false; self.length];
        for a in &all {
            busy[a.start..a.start + a.length]
                .iter_mut()
                .for_each(|b| *b = true);
        }
        let mut covered = 0;
        let mut attempts = 0;
        while covered < target && attempts < 10_000 {
            attempts += 1;
            let length = rng
                .random_range(r.min_length..=r.max_length)
                .min(target - covered);
            if span <= length {
                break;
            }
            let start = r.start_after + rng.random_range(0..=span - length);
            let lo = start.saturating_sub(r.gap);
            let hi = (start + length + r.gap).min(self.length);
            if busy[lo..hi].iter().any(|&b| b) {
                continue;
            }
            busy[start..start + length]
                .iter_mut()
                .for_each(|b| *b = true);
            let n_dims = rng.random_range(1..=self.dims);
            let mut dims: Vec<usize> = (0..self.dims).collect();
            for i in 0..n_dims {
                let j = rng.random_range(i..self.dims);
                dims.swap(i, j);
            }
            dims.truncate(n_dims);
            dims.sort_unstable();
            let kind = match rng.random_range(0..3) {
                0 => AnomalyKind::Spike,
                1 => AnomalyKind::LevelShift,
                _ => AnomalyKind::Burst,
            };
            all.push(AnomalySpec {
                kind,
                start,
                length,
                dims,
                magnitude: rng.random_range(r.min_magnitude..=r.max_magnitude),
            });
            covered += length;
        }
        all.sort_by_key(|a| a.start);
        Ok(all)
    }

    /// Generates the series and its per-cell labels. Deterministic per seed.
    pub fn generate(&self) -> Result<RawSeries> {
        let anomalies = self.resolved_anomalies()?;
        let (t_len, m) = (self.length, self.dims);

        let mut labels = vec![vec![0u8; m]; t_len];
        for a in &anomalies {
            for t in a.start..a.start + a.length {
                for &d in &a.dims {
                    if labels[t][d] == 1 {
                        return Err(Error::Overlap { t, dim: d });
                    }
                    labels[t][d] = 1;
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let phases: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                self.sinusoids
                    .iter()
                    .map(|_| rng.random_range(0.0..TAU))
                    .collect()
            })
            .collect();
        let mut values: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                (0..m)
                    .map(|d| {
                        let base: f64 = self
                            .sinusoids
                            .iter()
                            .zip(&phases[d])
                            .map(|(s, ph)| s.amplitude * (TAU * t as f64 / s.period + ph).sin())
                            .sum();
                        let z: f64 = StandardNormal.sample(&mut rng);
                        base + self.noise_sigma * z
                    })
                    .collect()
            })
            .collect();

        let std: Vec<f64> = (0..m)
            .map(|d| {
                let mean = values.iter().map(|r| r[d]).sum::<f64>() / t_len as f64;
                (values.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / t_len as f64).sqrt()
            })
            .collect();
        for a in &anomalies {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for t in a.start..a.start + a.length {
                let shared: f64 = StandardNormal.sample(&mut rng);
                let factor = match a.kind {
                    AnomalyKind::Spike => sign,
                    AnomalyKind::LevelShift => 1.0,
                    AnomalyKind::Burst => sign * (1.0 + 0.5 * f64::abs(shared)),
                };
                for &d in &a.dims {
                    values[t][d] += factor * a.magnitude * std[d];
                }
            }
        }
        RawSeries::new("synthetic", values, Some(labels))
    }
}
