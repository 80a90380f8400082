//! Run configuration: one TOML file with a section per pipeline stage.
//! Precedence is flags > file > defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tranad_core::dataset::{SynthSpec, DEFAULT_NORM_EPS};
use tranad_core::detection::DetectConfig;
use tranad_core::model::{Activation, FocusTarget, ModelConfig, ScaleMode};
use tranad_core::thresholding::PotConfig;
use tranad_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training series CSV, one row per timestamp.
    pub train: Option<PathBuf>,
    /// Test series CSV.
    pub test: Option<PathBuf>,
    /// Test labels: one {0, 1} column per dimension, or a single column.
    pub test_labels: Option<PathBuf>,
    /// Whether the CSV files start with a header line.
    pub has_header: bool,
    /// Leading fraction of the training series that is used.
    pub train_fraction: f64,
    /// Share of training windows used for fitting; the rest validate.
    pub split: f64,
    pub norm_eps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            test_labels: None,
            has_header: true,
            train_fraction: 1.0,
            split: 0.8,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }
}

/// Model hyperparameters; the data width m comes from the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Window length K.
    pub k: usize,
    /// Context cap L_ctx.
    pub l_ctx: usize,
    /// Attention heads; defaults to m.
    pub n_heads: Option<usize>,
    pub ff_hidden: usize,
    pub n_enc_layers: usize,
    pub ff_layers: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub scale_mode: ScaleMode,
    pub focus_target: FocusTarget,
    pub ln_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            k: d.k,
            l_ctx: d.l_ctx,
            n_heads: None,
            ff_hidden: d.ff_hidden,
            n_enc_layers: d.n_enc_layers,
            ff_layers: d.ff_layers,
            dropout: d.dropout,
            activation: d.activation,
            scale_mode: d.scale_mode,
            focus_target: d.focus_target,
            ln_eps: d.ln_eps,
        }
    }
}

impl ModelSection {
    pub fn build(&self, m: usize) -> ModelConfig {
        ModelConfig {
            k: self.k,
            l_ctx: self.l_ctx,
            n_heads: self.n_heads.unwrap_or(m),
            ff_hidden: self.ff_hidden,
            n_enc_layers: self.n_enc_layers,
            ff_layers: self.ff_layers,
            dropout: self.dropout,
            activation: self.activation,
            scale_mode: self.scale_mode,
            focus_target: self.focus_target,
            ln_eps: self.ln_eps,
            ..ModelConfig::new(m)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// The only seed. It replaces `synth.seed` and `train.seed`; every module
    /// forks its own stream from it by tag.
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub pot: PotConfig,
    pub detect: DetectConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Propagates the top-level seed into the sections that carry one.
    pub fn resolve(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction <= 1.0) {
            bail!(
                "data.train_fraction must be in (0, 1], got {}",
                d.train_fraction
            );
        }
        if !(d.split > 0.0 && d.split < 1.0) {
            bail!("data.split must be in (0, 1), got {}", d.split);
        }
        // the head count is only checkable once m is known
        let shape_only = ModelSection {
            n_heads: None,
            ..self.model.clone()
        };
        shape_only.build(1).validate()?;
        self.train.validate()?;
        self.pot.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("seed = 9\n[model]\nk = 1\n[pot]\nq = 0.001\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.k, 1);
        assert_eq!(cfg.model.l_ctx, ModelSection::default().l_ctx);
        assert_eq!(cfg.pot.q, 0.001);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[data]\ntrian = \"x.csv\"\n").is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        }
        .resolve();
        assert_eq!(cfg.synth.seed, 42);
        assert_eq!(cfg.train.seed, 42);
    }

    #[test]
    fn heads_default_to_m() {
        let m = ModelSection::default().build(3);
        assert_eq!((m.m, m.n_heads, m.d_model), (3, 3, 6));
        m.validate().unwrap();
    }

    #[test]
    fn bad_fraction_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.train_fraction = 0.0;
        assert!(cfg.validate().is_err());
    }
}
