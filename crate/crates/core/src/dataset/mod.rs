//! Series ingestion, min-max normalization, sliding windows, and the
//! synthetic benchmark generator.

mod csv_io;
mod synth;
mod window;

pub use csv_io::{load_csv, load_labels, write_matrix_csv};
pub use synth::{AnomalyKind, AnomalySpec, RandomAnomalies, Sinusoid, SynthSpec};
pub use window::{context_at, make_windows, split_train_val, window_at, WindowBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ε′ added to the min-max denominator.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

/// A raw multivariate series: `values[t][i]` is dimension `i` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub values: Vec<Vec<f64>>,
    /// Per-cell ground truth with the same shape as `values`.
    pub labels: Option<Vec<Vec<u8>>>,
}

impl RawSeries {
    pub fn new(
        name: impl Into<String>,
        values: Vec<Vec<f64>>,
        labels: Option<Vec<Vec<u8>>>,
    ) -> Result<Self> {
        let s = Self {
            name: name.into(),
            values,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let m = self.dims();
        if self.values.is_empty() || m == 0 {
            return Err(Error::EmptySeries);
        }
        for (t, row) in self.values.iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: row.len(),
                });
            }
            if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput { row: t, col });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.values.len() || labels.iter().any(|r| r.len() != m) {
                return Err(Error::ShapeMismatch(format!(
                    "labels do not match the {}x{m} values",
                    self.values.len()
                )));
            }
        }
        Ok(())
    }

    /// Rows `start..end`, labels included.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::EmptySeries);
        }
        Self::new(
            self.name.clone(),
            self.values[start..end].to_vec(),
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )
    }
}

/// Per-dimension minimum and maximum of the training series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub eps: f64,
}

impl NormStats {
    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, dim: usize, v: f64) -> f64 {
        (v - self.min[dim]) / (self.max[dim] - self.min[dim] + self.eps)
    }

    pub fn denormalize(&self, dim: usize, v: f64) -> f64 {
        v * (self.max[dim] - self.min[dim] + self.eps) + self.min[dim]
    }
}

/// A normalized series.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<Vec<f64>>,
    pub labels: Option<Vec<Vec<u8>>>,
    pub stats: NormStats,
    /// Entries outside [0, 1]; expected for test data that leaves the
    /// training range, and kept as-is.
    pub out_of_range: usize,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.stats.dims()
    }

    /// Leading `len` rows.
    pub fn truncate(&self, len: usize) -> Self {
        Self {
            values: self.values[..len].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..len].to_vec()),
            stats: self.stats.clone(),
            out_of_range: 0,
        }
    }
}

/// Fits min-max statistics on `train` and normalizes it with them.
pub fn fit_normalize(train: &RawSeries, eps: f64) -> Result<(TimeSeries, NormStats)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "normalization eps must be > 0, got {eps}"
        )));
    }
    train.validate()?;
    let m = train.dims();
    let mut min = vec![f64::INFINITY; m];
    let mut max = vec![f64::NEG_INFINITY; m];
    for row in &train.values {
        for (i, &v) in row.iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    let stats = NormStats { min, max, eps };
    let ts = apply_normalize(train, &stats)?;
    Ok((ts, stats))
}

/// Normalizes `series` with previously fitted statistics.
pub fn apply_normalize(series: &RawSeries, stats: &NormStats) -> Result<TimeSeries> {
    series.validate()?;
    if series.dims() != stats.dims() {
        return Err(Error::DimensionMismatch {
            expected: stats.dims(),
            found: series.dims(),
        });
    }
    let mut out_of_range = 0;
    let values = series
        .values
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let n = stats.normalize(i, v);
                    if !(0.0..=1.0).contains(&n) {
                        out_of_range += 1;
                    }
                    n
                })
                .collect()
        })
        .collect();
    Ok(TimeSeries {
        values,
        labels: series.labels.clone(),
        stats: stats.clone(),
        out_of_range,
    })
}
