//! Online scoring of a test stream, per-dimension labeling and diagnosis.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::atomic_write;
use crate::dataset::{context_at, window_at, TimeSeries};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::thresholding::{fit_thresholds, PotConfig, ThresholdModel};

/// Which rows of the window contribute to a timestamp's score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReduce {
    /// Squared deviation at the window's last row.
    #[default]
    LastRow,
    /// Squared deviation averaged over the window's rows.
    WindowMean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_reduce: ScoreReduce,
    /// Re-fit the thresholds after every this many test scores; 0 keeps
    /// them frozen.
    pub refit_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub t: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// OR over `labels`.
    pub label: u8,
}

/// Per-dimension anomaly score of one window:
/// s_i = ½(O1 − W)² + ½(Ô2 − W)², reduced over rows per `reduce`.
pub fn score_window(
    state: &ModelState,
    window: &[f64],
    context: &[f64],
    reduce: ScoreReduce,
) -> Result<Vec<f64>> {
    let out = state.infer(window, context, false)?;
    let (k, m) = (state.config.k, state.config.m);
    let row_score = |r: usize, i: usize| {
        let idx = r * m + i;
        let w = window[idx];
        0.5 * (out.o1.data()[idx] - w).powi(2) + 0.5 * (out.o2_hat.data()[idx] - w).powi(2)
    };
    Ok((0..m)
        .map(|i| match reduce {
            ScoreReduce::LastRow => row_score(k - 1, i),
            ScoreReduce::WindowMean => (0..k).map(|r| row_score(r, i)).sum::<f64>() / k as f64,
        })
        .collect())
}

fn check_dims(state: &ModelState, series: &TimeSeries) -> Result<()> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if series.dims() != state.config.m {
        return Err(Error::ConfigMismatch(format!(
            "model has {} dimensions, data has {}",
            state.config.m,
            series.dims()
        )));
    }
    Ok(())
}

/// Scores every timestamp of a series. Each score depends only on rows up to
/// its own timestamp, so timestamps are scored in parallel.
pub fn score_series(
    state: &ModelState,
    series: &TimeSeries,
    reduce: ScoreReduce,
) -> Result<Vec<Vec<f64>>> {
    check_dims(state, series)?;
    let (k, l_ctx) = (state.config.k, state.config.l_ctx);
    let v = &series.values;
    (0..v.len())
        .into_par_iter()
        .map(|t| score_window(state, &window_at(v, t, k), &context_at(v, t, l_ctx), reduce))
        .collect()
}

/// y_i = 1(s_i ≥ z_i) and their OR.
pub fn label_scores(scores: &[f64], thresholds: &[f64]) -> (Vec<u8>, u8) {
    let labels: Vec<u8> = scores
        .iter()
        .zip(thresholds)
        .map(|(s, z)| u8::from(s >= z))
        .collect();
    let any = u8::from(labels.contains(&1));
    (labels, any)
}

fn records(
    scores: Vec<Vec<f64>>,
    mut threshold_at: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::with_capacity(scores.len());
    for (t, s) in scores.into_iter().enumerate() {
        let z = threshold_at(t, &s)?;
        let (labels, label) = label_scores(&s, &z);
        out.push(ScoreRecord {
            t,
            scores: s,
            labels,
            label,
        });
    }
    Ok(out)
}

/// Labels a test stream against frozen thresholds, one record per timestamp
/// in time order.
pub fn detect_stream(
    state: &ModelState,
    test: &TimeSeries,
    thresholds: &ThresholdModel,
    cfg: &DetectConfig,
) -> Result<Vec<ScoreRecord>> {
    if thresholds.dims.len() != state.config.m {
        return Err(Error::ConfigMismatch(format!(
            "{} thresholds for a {}-dimensional model",
            thresholds.dims.len(),
            state.config.m
        )));
    }
    let z = thresholds.thresholds();
    let scores = score_series(state, test, cfg.score_reduce)?;
    records(scores, |_, _| Ok(z.clone()))
}

/// Streaming variant: thresholds start from a fit on `calibration` and are
/// re-fit on calibration plus the test scores seen so far after every
/// `cfg.refit_every` test scores. Returns the records and the last model.
pub fn detect_stream_refit(
    state: &ModelState,
    test: &TimeSeries,
    calibration: &[Vec<f64>],
    pot: &PotConfig,
    cfg: &DetectConfig,
) -> Result<(Vec<ScoreRecord>, ThresholdModel)> {
    let mut model = fit_thresholds(calibration, pot)?;
    let scores = score_series(state, test, cfg.score_reduce)?;
    let mut history = calibration.to_vec();
    let mut z = model.thresholds();
    let recs = records(scores, |t, s| {
        let current = z.clone();
        history.push(s.to_vec());
        if cfg.refit_every > 0 && (t + 1) % cfg.refit_every == 0 {
            model = fit_thresholds(&history, pot)?;
            z = model.thresholds();
        }
        Ok(current)
    })?;
    Ok((recs, model))
}

/// Dimensions by descending score, ties by ascending index.
pub fn rank_dims(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn diagnose(records: &[ScoreRecord]) -> Vec<Vec<usize>> {
    records.iter().map(|r| rank_dims(&r.scores)).collect()
}

/// Writes a detection report: `#`-prefixed TOML header holding the
/// threshold model, then CSV columns `t, s_1..s_m, y_1..y_m, y`.
pub fn write_report(
    path: &Path,
    records: &[ScoreRecord],
    thresholds: &ThresholdModel,
) -> Result<()> {
    let header = toml::to_string(thresholds).map_err(|e| Error::Serialize(e.to_string()))?;
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    let m = thresholds.dims.len();
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=m).map(|i| format!("s_{i}")));
    cols.extend((1..=m).map(|i| format!("y_{i}")));
    cols.push("y".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}", r.t);
        for s in &r.scores {
            let _ = write!(out, ",{s:e}");
        }
        for y in &r.labels {
            let _ = write!(out, ",{y}");
        }
        let _ = writeln!(out, ",{}", r.label);
    }
    atomic_write(path, out.as_bytes())
}

/// Parses a report written by [`write_report`].
pub fn read_report(path: &Path) -> Result<(ThresholdModel, Vec<ScoreRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut header = String::new();
    let mut body = Vec::new();
    for line in text.lines() {
        match line.strip_prefix('#') {
            Some(h) if body.is_empty() => {
                header.push_str(h.strip_prefix(' ').unwrap_or(h));
                header.push('\n');
            }
            _ => body.push(line),
        }
    }
    let model: ThresholdModel = toml::from_str(&header).map_err(|e| Error::Parse {
        row: 0,
        col: 0,
        msg: format!("report header: {e}"),
    })?;
    let m = model.dims.len();
    let parse_err = |row: usize, col: usize, msg: String| Error::Parse { row, col, msg };
    let mut records = Vec::new();
    for (row, line) in body.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 * m + 2 {
            return Err(parse_err(
                row,
                cells.len(),
                format!("expected {} columns", 2 * m + 2),
            ));
        }
        let t = cells[0]
            .parse()
            .map_err(|e| parse_err(row, 0, format!("{e}")))?;
        let scores = cells[1..=m]
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>()
                    .map_err(|e| parse_err(row, c + 1, format!("{e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = cells[m + 1..=2 * m + 1]
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<u8>()
                    .map_err(|e| parse_err(row, c + m + 1, format!("{e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (label, labels) = (labels[m], labels[..m].to_vec());
        records.push(ScoreRecord {
            t,
            scores,
            labels,
            label,
        });
    }
    Ok((model, records))
}
