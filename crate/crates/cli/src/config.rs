//! Experiment configuration: one TOML file covering the world, model,
//! training, feedback, evaluation, data and output settings, with dotted
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mos_core::evaluator::EvalConfig;
use mos_core::model::ModelConfig;
use mos_core::sampler::FeedbackConfig;
use mos_core::synthworld::WorldConfig;
use mos_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Which scenes make up the training and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generated training scenes, ids `0..train_scenes`.
    pub train_scenes: usize,
    /// Generated test scenes, ids `test_first..test_first + test_scenes`.
    pub test_scenes: usize,
    pub test_first: u64,
    /// Dataset files used instead of generating scenes.
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 512,
            test_scenes: 256,
            test_first: 1_000_000,
            train_file: None,
            test_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Keep a numbered checkpoint every this many epochs (0: only `last.ckpt`).
    pub checkpoint_every: usize,
    /// Evaluate on the test set every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            eval_every: 0,
        }
    }
}

/// Settings for the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Learning-rate cap for rungs with fixed loss weights, which diverge at
    /// rates the learned weighting tolerates.
    pub fixed_weight_lr: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { fixed_weight_lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub feedback: FeedbackConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?,
                p.display().to_string(),
            ),
            None => (String::new(), "<defaults>".to_string()),
        };
        Self::parse(&text, &origin, overrides)
    }

    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        // Parse the file on its own first so errors point at its lines.
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{origin}: {e}"))?;
        let cfg = cfg.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted overrides without validating the result.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut table = toml::Table::try_from(&self).context("serializing configuration")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::deserialize(table).map_err(|e| anyhow::anyhow!("after overrides {overrides:?}: {e}"))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.feedback.validate()?;
        if self.world.canvas != self.model.input_size {
            bail!(
                "invalid configuration: world.canvas ({}) must equal model.input_size ({})",
                self.world.canvas,
                self.model.input_size
            );
        }
        let e = &self.eval;
        for (name, v) in [
            ("score_threshold", e.score_threshold),
            ("nms_iou", e.nms_iou),
            ("match_iou", e.match_iou),
            ("match_score", e.match_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bail!("invalid configuration: eval.{name} must be in [0, 1], got {v}");
            }
        }
        let lr = self.ablate.fixed_weight_lr;
        if !(lr.is_finite() && lr > 0.0) {
            bail!("invalid configuration: ablate.fixed_weight_lr must be positive, got {lr}");
        }
        if self.data.train_file.is_none() && self.data.train_scenes == 0 {
            bail!("invalid configuration: data.train_scenes must be positive");
        }
        if self.data.test_file.is_none() && self.data.test_scenes == 0 {
            bail!("invalid configuration: data.test_scenes must be positive");
        }
        if self.data.test_file.is_none() && self.data.test_first < self.data.train_scenes as u64 {
            bail!("invalid configuration: data.test_first must not overlap the training ids 0..data.train_scenes");
        }
        Ok(())
    }
}

/// Sets `a.b.c=value` in `table`. The value is read as a TOML value and
/// falls back to a plain string, so `output.dir=runs/x` needs no quotes.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!("override {item:?} is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override {item:?} has an empty key segment");
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {item:?}: {p} is not a table"),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Everything needed to reproduce a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub program: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            program: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
        }
    }
}
