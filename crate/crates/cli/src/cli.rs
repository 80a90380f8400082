//! Argument parsing and dispatch.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use tranad_core::evaluation::EvalReport;

use crate::commands;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "tranad",
    version,
    about = "Transformer anomaly detection and diagnosis for multivariate time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic series with labeled anomalies.
    Synth(SynthCmd),
    /// Train a model on a training CSV.
    Train(TrainCmd),
    /// Score and label a test CSV with a trained model.
    Detect(DetectCmd),
    /// Compute detection and diagnosis metrics for a report.
    Eval(EvalCmd),
    /// Dump attention and focus matrices for plotting.
    Inspect(InspectCmd),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Suppress progress output.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PotFlags {
    /// POT risk coefficient q.
    #[arg(long)]
    pub pot_q: Option<f64>,
    /// POT low quantile for the initial threshold.
    #[arg(long)]
    pub pot_low_quantile: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    /// Training CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Leading fraction of the training series to use.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Window length K.
    #[arg(long)]
    pub window: Option<usize>,
    /// Context cap L_ctx.
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub no_self_condition: bool,
    #[arg(long)]
    pub no_adversarial: bool,
    #[arg(long)]
    pub no_maml: bool,
    #[command(flatten)]
    pub pot: PotFlags,
}

#[derive(Debug, Args)]
pub struct DetectCmd {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding the trained model; defaults to --out.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training CSV, used only when the saved training scores do not fit.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Re-fit thresholds after every N test scores; 0 freezes them.
    #[arg(long)]
    pub refit_every: Option<usize>,
    #[command(flatten)]
    pub pot: PotFlags,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: Common,
    /// Detection report; defaults to report.csv in --out.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Test labels CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectCmd {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding the trained model; defaults to --out.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// First test timestamp to dump.
    #[arg(long)]
    pub start: Option<usize>,
    /// One past the last test timestamp to dump.
    #[arg(long)]
    pub end: Option<usize>,
}

impl Common {
    fn base(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

impl PotFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(q) = self.pot_q {
            cfg.pot.q = q;
        }
        if let Some(q) = self.pot_low_quantile {
            cfg.pot.low_quantile = q;
        }
    }
}

fn finish(cfg: RunConfig) -> Result<RunConfig> {
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

impl TrainCmd {
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = self.common.base()?;
        set(&mut cfg.data.train, self.data.clone().map(Some));
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.data.train_fraction, self.train_fraction);
        set(&mut cfg.model.k, self.window);
        set(&mut cfg.model.l_ctx, self.context);
        cfg.train.use_self_condition &= !self.no_self_condition;
        cfg.train.use_adversarial &= !self.no_adversarial;
        cfg.train.use_maml &= !self.no_maml;
        self.pot.apply(&mut cfg);
        finish(cfg)
    }
}

impl DetectCmd {
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = self.common.base()?;
        set(&mut cfg.data.test, self.data.clone().map(Some));
        set(&mut cfg.data.train, self.train_data.clone().map(Some));
        set(&mut cfg.detect.refit_every, self.refit_every);
        self.pot.apply(&mut cfg);
        finish(cfg)
    }
}

impl InspectCmd {
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = self.common.base()?;
        set(&mut cfg.data.test, self.data.clone().map(Some));
        finish(cfg)
    }
}

fn print_eval(result: &EvalReport) {
    let auc = result
        .auc
        .map_or_else(|| "n/a".into(), |a| format!("{a:.4}"));
    println!(
        "raw: P {:.4} R {:.4} F1 {:.4} | point-adjusted: P {:.4} R {:.4} F1 {:.4} | AUC {auc}",
        result.raw.precision,
        result.raw.recall,
        result.raw.f1,
        result.adjusted.precision,
        result.adjusted.recall,
        result.adjusted.f1
    );
    if let Some(d) = &result.diagnosis {
        println!(
            "diagnosis: HitRate@100% {:.4} HitRate@150% {:.4} NDCG@100% {:.4} NDCG@150% {:.4}",
            d.hitrate_100, d.hitrate_150, d.ndcg_100, d.ndcg_150
        );
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = finish(c.common.base()?)?;
            for f in commands::synth(&cfg, &c.common.out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            let summary = commands::train(&cfg, &c.common.out, c.common.quiet)?;
            for f in summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Detect(c) => {
            let cfg = c.config()?;
            let model = c.model.clone().unwrap_or_else(|| c.common.out.clone());
            let summary = commands::detect(&cfg, &model, &c.common.out, c.common.quiet)?;
            for f in summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Eval(c) => {
            let cfg = finish(c.common.base()?)?;
            let report = c
                .report
                .clone()
                .unwrap_or_else(|| c.common.out.join(commands::REPORT_CSV));
            let labels = c.labels.clone().or(cfg.data.test_labels.clone());
            match commands::eval(
                &report,
                labels.as_deref(),
                cfg.data.has_header,
                &c.common.out,
                c.common.quiet,
            )? {
                Some(result) => print_eval(&result),
                None => {
                    println!("notice: no labels given; detection and diagnosis metrics skipped")
                }
            }
        }
        Command::Inspect(c) => {
            let cfg = c.config()?;
            let model = c.model.clone().unwrap_or_else(|| c.common.out.clone());
            for f in commands::inspect(&cfg, &model, &c.common.out, (c.start, c.end))? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("tranad").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 3\n[train]\nepochs = 2\nbatch_size = 16\n[pot]\nq = 0.0001\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let Command::Train(c) = parse(&[
            "train",
            "--config",
            p,
            "--epochs",
            "7",
            "--no-maml",
            "--pot-q",
            "0.0002",
        ])
        .command
        else {
            panic!("not train")
        };
        let cfg = c.config().unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert!(!cfg.train.use_maml);
        assert!(cfg.train.use_adversarial);
        assert_eq!(cfg.pot.q, 0.0002);
        assert_eq!(cfg.model.k, 10);
    }

    #[test]
    fn seed_flag_beats_file() {
        let Command::Detect(c) = parse(&["detect", "--seed", "11"]).command else {
            panic!("not detect")
        };
        assert_eq!(c.config().unwrap().seed, 11);
    }

    #[test]
    fn invalid_pot_flags_are_rejected() {
        let Command::Train(c) =
            parse(&["train", "--pot-q", "0.5", "--pot-low-quantile", "0.1"]).command
        else {
            panic!("not train")
        };
        assert!(c.config().is_err());
    }
}
