//! The five commands as library functions, shared by the binary and tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tranad_core::artifact::{atomic_write, read_toml, write_toml};
use tranad_core::dataset::{
    apply_normalize, context_at, fit_normalize, load_csv, load_labels, make_windows,
    split_train_val, window_at, NormStats, RawSeries, TimeSeries,
};
use tranad_core::detection::{
    detect_stream, detect_stream_refit, diagnose, read_report, score_series, write_report,
    ScoreRecord, ScoreReduce,
};
use tranad_core::evaluation::{evaluate, EvalReport, CSV_COLUMNS};
use tranad_core::model::{load_checkpoint, mean_of, save_checkpoint, ModelState};
use tranad_core::thresholding::{fit_thresholds, ThresholdModel};
use tranad_core::training::{fit_with_progress, TrainReport};
use tranad_core::Error;

use crate::config::RunConfig;
use crate::outputs::Outputs;

pub const SERIES_CSV: &str = "series.csv";
pub const LABELS_CSV: &str = "labels.csv";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const TEST_LABELS_CSV: &str = "test_labels.csv";
pub const SYNTH_TOML: &str = "synth.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const NORM_TOML: &str = "norm.toml";
pub const TRAIN_REPORT_TOML: &str = "train_report.toml";
pub const TRAIN_SCORES_CSV: &str = "train_scores.csv";
pub const THRESHOLDS_TOML: &str = "thresholds.toml";
pub const CONFIG_TOML: &str = "config.toml";
pub const REPORT_CSV: &str = "report.csv";
pub const EVAL_TOML: &str = "eval.toml";
pub const EVAL_CSV: &str = "eval.csv";
pub const ATTENTION_CSV: &str = "attention.csv";
pub const CROSS_ATTENTION_CSV: &str = "cross_attention.csv";
pub const FOCUS_CSV: &str = "focus.csv";

fn dim_header(prefix: &str, m: usize) -> String {
    (1..=m)
        .map(|i| format!("{prefix}{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn matrix_csv<T: std::fmt::Display>(header: &str, rows: &[Vec<T>]) -> String {
    let mut s = format!("{header}\n");
    for row in rows {
        let line: Vec<String> = row.iter().map(ToString::to_string).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn write_series(path: &Path, values: &[Vec<f64>]) -> Result<()> {
    let m = values.first().map_or(0, Vec::len);
    Ok(atomic_write(
        path,
        matrix_csv(&dim_header("x", m), values).as_bytes(),
    )?)
}

fn write_labels(path: &Path, labels: &[Vec<u8>]) -> Result<()> {
    let m = labels.first().map_or(0, Vec::len);
    Ok(atomic_write(
        path,
        matrix_csv(&dim_header("y", m), labels).as_bytes(),
    )?)
}

fn progress(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Writes the synthetic series, its labels and the generator settings; with a train
/// length set, also the train prefix and the test suffix with its labels.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = &cfg.synth;
    let series = spec.generate().context("generating the synthetic series")?;
    let labels = series.labels.as_deref().unwrap_or_default();
    let mut outputs = Outputs::new(out)?;
    write_series(&outputs.file(SERIES_CSV), &series.values)?;
    write_labels(&outputs.file(LABELS_CSV), labels)?;
    if let Some(n) = spec.train_len {
        if n == 0 || n >= series.len() {
            bail!(
                "synth.train_len {n} must lie strictly inside the series length {}",
                series.len()
            );
        }
        write_series(&outputs.file(TRAIN_CSV), &series.values[..n])?;
        write_series(&outputs.file(TEST_CSV), &series.values[n..])?;
        write_labels(&outputs.file(TEST_LABELS_CSV), &labels[n..])?;
    }
    write_toml(&outputs.file(SYNTH_TOML), spec)?;
    Ok(outputs.commit())
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("no {what} given: set it in the config or pass {flag}"))
}

/// Leading `train_fraction` of the training CSV.
fn load_train(cfg: &RunConfig) -> Result<RawSeries> {
    let path = require(&cfg.data.train, "training data", "--data")?;
    let raw = load_csv(path, cfg.data.has_header, None)
        .with_context(|| format!("loading {}", path.display()))?;
    let n = (cfg.data.train_fraction * raw.len() as f64).floor() as usize;
    if n < 2 {
        bail!(
            "train_fraction {} leaves {n} of {} training rows",
            cfg.data.train_fraction,
            raw.len()
        );
    }
    Ok(raw.slice(0, n)?)
}

fn check_width(state: &ModelState, raw: &RawSeries, what: &str) -> Result<()> {
    if raw.dims() != state.config.m {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {} dimensions, {what} has {}",
            state.config.m,
            raw.dims()
        ))
        .into());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoresHeader {
    score_reduce: ScoreReduce,
}

fn write_scores(path: &Path, scores: &[Vec<f64>], reduce: ScoreReduce) -> Result<()> {
    let header = toml::to_string(&ScoresHeader {
        score_reduce: reduce,
    })?;
    let mut s = String::new();
    for line in header.lines() {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(
        s,
        "{}",
        dim_header("s_", scores.first().map_or(0, Vec::len))
    );
    for row in scores {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(atomic_write(path, s.as_bytes())?)
}

/// Reads saved calibration scores if they were computed with `reduce`.
fn read_scores(path: &Path, reduce: ScoreReduce) -> Result<Option<Vec<Vec<f64>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let header: String = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{}\n", l.trim_start_matches('#').trim()))
        .collect();
    let parsed: ScoresHeader =
        toml::from_str(&header).with_context(|| format!("header of {}", path.display()))?;
    if parsed.score_reduce != reduce {
        return Ok(None);
    }
    Ok(Some(load_csv(path, true, None)?.values))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub report: TrainReport,
    pub thresholds: ThresholdModel,
    pub files: Vec<PathBuf>,
}

/// Normalizes the training data, windows it, trains, and writes the kept
/// checkpoint, the normalization statistics, the training report, the
/// training-period scores and the thresholds fitted on them.
pub fn train(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<TrainSummary> {
    let raw = load_train(cfg)?;
    let (series, stats) = fit_normalize(&raw, cfg.data.norm_eps)?;
    let model_cfg = cfg.model.build(raw.dims());
    model_cfg.validate()?;
    let windows = make_windows(&series, model_cfg.k, model_cfg.l_ctx)?;
    let (fit_set, val_set) = split_train_val(&windows, cfg.data.split)?;
    progress(
        quiet,
        format!(
            "training on {} windows, validating on {} (m={}, K={}, L_ctx={})",
            fit_set.len(),
            val_set.len(),
            model_cfg.m,
            model_cfg.k,
            model_cfg.l_ctx
        ),
    );
    let mut state = ModelState::new(model_cfg, cfg.seed)?;
    let report = fit_with_progress(&mut state, &fit_set, &val_set, &cfg.train, |r| {
        progress(quiet, r.progress_line())
    })?;
    let calibration = score_series(&state, &series, cfg.detect.score_reduce)?;
    let thresholds = fit_thresholds(&calibration, &cfg.pot)?;

    let mut outputs = Outputs::new(out)?;
    save_checkpoint(&outputs.file(CHECKPOINT), &state)?;
    write_toml(&outputs.file(NORM_TOML), &stats)?;
    write_toml(&outputs.file(TRAIN_REPORT_TOML), &report)?;
    write_scores(
        &outputs.file(TRAIN_SCORES_CSV),
        &calibration,
        cfg.detect.score_reduce,
    )?;
    write_toml(&outputs.file(THRESHOLDS_TOML), &thresholds)?;
    atomic_write(&outputs.file(CONFIG_TOML), cfg.to_toml()?.as_bytes())?;
    progress(
        quiet,
        format!(
            "kept epoch {}, thresholds {:?}",
            report.best_epoch,
            thresholds.thresholds()
        ),
    );
    Ok(TrainSummary {
        report,
        thresholds,
        files: outputs.commit(),
    })
}

struct Loaded {
    state: ModelState,
    stats: NormStats,
}

fn load_model(model_dir: &Path) -> Result<Loaded> {
    let ckpt = model_dir.join(CHECKPOINT);
    let state = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let stats: NormStats = read_toml(&model_dir.join(NORM_TOML))?;
    if stats.dims() != state.config.m {
        return Err(Error::ConfigMismatch(format!(
            "normalization covers {} dimensions, checkpoint {}",
            stats.dims(),
            state.config.m
        ))
        .into());
    }
    Ok(Loaded { state, stats })
}

fn load_test(cfg: &RunConfig, loaded: &Loaded) -> Result<TimeSeries> {
    let path = require(&cfg.data.test, "test data", "--data")?;
    let raw = load_csv(path, cfg.data.has_header, None)
        .with_context(|| format!("loading {}", path.display()))?;
    check_width(&loaded.state, &raw, "the test data")?;
    Ok(apply_normalize(&raw, &loaded.stats)?)
}

/// Training-period scores: the saved ones when compatible, else recomputed
/// from the training data.
fn calibration_scores(cfg: &RunConfig, model_dir: &Path, loaded: &Loaded) -> Result<Vec<Vec<f64>>> {
    if let Some(scores) = read_scores(&model_dir.join(TRAIN_SCORES_CSV), cfg.detect.score_reduce)? {
        return Ok(scores);
    }
    let raw = load_train(cfg)
        .context("no compatible saved training scores; rescoring the training data")?;
    check_width(&loaded.state, &raw, "the training data")?;
    let series = apply_normalize(&raw, &loaded.stats)?;
    Ok(score_series(
        &loaded.state,
        &series,
        cfg.detect.score_reduce,
    )?)
}

#[derive(Clone, Debug)]
pub struct DetectSummary {
    pub records: Vec<ScoreRecord>,
    pub thresholds: ThresholdModel,
    pub files: Vec<PathBuf>,
}

/// Fits the thresholds on training-period scores, streams the test series
/// and writes the detection report.
pub fn detect(cfg: &RunConfig, model_dir: &Path, out: &Path, quiet: bool) -> Result<DetectSummary> {
    let loaded = load_model(model_dir)?;
    let test = load_test(cfg, &loaded)?;
    let calibration = calibration_scores(cfg, model_dir, &loaded)?;
    let (records, thresholds) = if cfg.detect.refit_every > 0 {
        detect_stream_refit(&loaded.state, &test, &calibration, &cfg.pot, &cfg.detect)?
    } else {
        let th = fit_thresholds(&calibration, &cfg.pot)?;
        (detect_stream(&loaded.state, &test, &th, &cfg.detect)?, th)
    };
    let mut outputs = Outputs::new(out)?;
    write_report(&outputs.file(REPORT_CSV), &records, &thresholds)?;
    let flagged = records.iter().filter(|r| r.label == 1).count();
    progress(
        quiet,
        format!("{flagged} of {} timestamps flagged", records.len()),
    );
    Ok(DetectSummary {
        records,
        thresholds,
        files: outputs.commit(),
    })
}

/// Mean of a record's per-dimension scores; the ranking score for AUC.
pub fn aggregate_score(r: &ScoreRecord) -> f64 {
    r.scores.iter().sum::<f64>() / r.scores.len().max(1) as f64
}

/// Metrics of a detection report against labels, written as TOML and as a
/// CSV row. Without labels nothing is computed or written.
pub fn eval(
    report: &Path,
    labels: Option<&Path>,
    has_header: bool,
    out: &Path,
    quiet: bool,
) -> Result<Option<EvalReport>> {
    let (thresholds, records) =
        read_report(report).with_context(|| format!("reading {}", report.display()))?;
    let Some(labels) = labels else {
        return Ok(None);
    };
    let truth_rows =
        load_labels(labels, has_header).with_context(|| format!("loading {}", labels.display()))?;
    if truth_rows.len() != records.len() {
        return Err(Error::LengthMismatch {
            left: records.len(),
            right: truth_rows.len(),
        }
        .into());
    }
    let m = thresholds.dims.len();
    let width = truth_rows[0].len();
    if width != m && width != 1 {
        return Err(Error::ShapeMismatch(format!(
            "labels have {width} columns, the report has {m} dimensions"
        ))
        .into());
    }
    let truth: Vec<u8> = truth_rows
        .iter()
        .map(|r| u8::from(r.contains(&1)))
        .collect();
    let pred: Vec<u8> = records.iter().map(|r| r.label).collect();
    let scores: Vec<f64> = records.iter().map(aggregate_score).collect();
    let rankings = diagnose(&records);
    let per_dim = (width == m && m > 1).then_some((rankings.as_slice(), truth_rows.as_slice()));
    if per_dim.is_none() {
        progress(
            quiet,
            "notice: labels are not per-dimension; diagnosis metrics skipped",
        );
    }
    let result = evaluate(&pred, &scores, &truth, per_dim)?;
    if result.auc.is_none() {
        progress(quiet, "notice: labels contain a single class; AUC skipped");
    }

    let mut outputs = Outputs::new(out)?;
    write_toml(&outputs.file(EVAL_TOML), &result)?;
    let csv = format!("{}\n{}\n", CSV_COLUMNS.join(","), result.csv_row());
    atomic_write(&outputs.file(EVAL_CSV), csv.as_bytes())?;
    outputs.commit();
    Ok(Some(result))
}

struct Inspected {
    window_self: Vec<Vec<f64>>,
    cross: Vec<Vec<f64>>,
    focus: Vec<Vec<f64>>,
}

/// Dumps head-averaged window self-attention, cross-attention over the
/// context, and phase-1 focus scores for test timestamps `start..end`.
pub fn inspect(
    cfg: &RunConfig,
    model_dir: &Path,
    out: &Path,
    range: (Option<usize>, Option<usize>),
) -> Result<Vec<PathBuf>> {
    let loaded = load_model(model_dir)?;
    let test = load_test(cfg, &loaded)?;
    let state = &loaded.state;
    let (k, l_ctx, m) = (state.config.k, state.config.l_ctx, state.config.m);
    let start = range.0.unwrap_or(0);
    let end = range.1.unwrap_or(test.len()).min(test.len());
    if start >= end {
        bail!(
            "empty timestamp range {start}..{end} for a series of length {}",
            test.len()
        );
    }
    let parts: Vec<Result<Inspected>> = (start..end)
        .into_par_iter()
        .map(|t| {
            let out = state.infer(
                &window_at(&test.values, t, k),
                &context_at(&test.values, t, l_ctx),
                true,
            )?;
            let maps = out
                .attention_maps
                .ok_or_else(|| anyhow!("model returned no attention maps"))?;
            let avg = |ms: &[tranad_core::diffcore::Tensor]| {
                mean_of(ms)
                    .map(|t| t.to_rows())
                    .ok_or_else(|| anyhow!("model has no attention heads"))
            };
            let cross = avg(&maps.cross)?
                .into_iter()
                .map(|row| {
                    let mut padded = vec![0.0; l_ctx - row.len()];
                    padded.extend(row);
                    padded
                })
                .collect();
            Ok(Inspected {
                window_self: avg(&maps.window_self)?,
                cross,
                focus: out.focus.to_rows(),
            })
        })
        .collect();

    let mut att = format!(
        "# window self-attention averaged over heads: {} timestamps x {k} query rows x {k} key rows, oldest first; each line sums to 1\n",
        end - start
    );
    let mut cross = format!(
        "# cross-attention averaged over heads: {} timestamps x {k} window rows x {l_ctx} context rows, oldest first; shorter contexts are left-padded with 0; each line sums to 1\n",
        end - start
    );
    let mut focus = format!(
        "# phase-1 focus score (O1 - W)^2: {} timestamps x {k} window rows x {m} dimensions\n",
        end - start
    );
    let _ = writeln!(
        att,
        "t,row,{}",
        (0..k)
            .map(|j| format!("k_{j}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    let _ = writeln!(
        cross,
        "t,row,{}",
        (0..l_ctx)
            .map(|j| format!("c_{j}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    let _ = writeln!(focus, "t,row,{}", dim_header("f_", m));
    for (t, part) in (start..end).zip(parts) {
        let part = part?;
        for (buf, rows) in [
            (&mut att, &part.window_self),
            (&mut cross, &part.cross),
            (&mut focus, &part.focus),
        ] {
            for (i, row) in rows.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(ToString::to_string).collect();
                let _ = writeln!(buf, "{t},{i},{}", vals.join(","));
            }
        }
    }
    let mut outputs = Outputs::new(out)?;
    atomic_write(&outputs.file(ATTENTION_CSV), att.as_bytes())?;
    atomic_write(&outputs.file(CROSS_ATTENTION_CSV), cross.as_bytes())?;
    atomic_write(&outputs.file(FOCUS_CSV), focus.as_bytes())?;
    Ok(outputs.commit())
}
