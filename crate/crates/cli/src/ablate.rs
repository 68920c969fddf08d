//! `ablate`: baseline, then cross-stitch head, learned loss weights and
//! online feedback added one at a time, each over several seeds.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use mos_core::evaluator::EvalReport;
use mos_core::trainer::{evaluate_model, train, Record, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Manifest};
use crate::data::{test_set, train_set, write_json};

pub const RUNGS: [&str; 4] = ["Baseline", "+ MTH", "+ UML", "+ Online Feedback"];

/// `cfg` with the features of rung `rung` (0..4) switched on. Rungs with
/// fixed loss weights train at no more than `ablate.fixed_weight_lr`.
pub fn rung_config(cfg: &ExperimentConfig, rung: usize, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.mth = rung >= 1;
    c.train.uml = rung >= 2;
    c.train.feedback = rung >= 3;
    if !c.train.uml {
        c.train.lr = c.train.lr.min(cfg.ablate.fixed_weight_lr);
    }
    c.train.seed = cfg.train.seed + seed;
    c.world.seed = cfg.world.seed + seed;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub ap: Option<Stat>,
    pub ap_small: Option<Stat>,
    pub ap_medium: Option<Stat>,
    pub ap_large: Option<Stat>,
    pub nme: Option<Stat>,
    pub pose_mae: Option<Stat>,
    pub reports: Vec<EvalReport>,
}

impl Row {
    fn new(name: &str, reports: Vec<EvalReport>) -> Self {
        let stat = |f: fn(&EvalReport) -> Option<f64>| Stat::of(reports.iter().filter_map(f));
        Self {
            name: name.to_string(),
            ap: stat(|r| r.ap),
            ap_small: stat(|r| r.ap_small),
            ap_medium: stat(|r| r.ap_medium),
            ap_large: stat(|r| r.ap_large),
            nme: stat(|r| r.nme),
            pose_mae: stat(|r| r.pose_mae.map(|m| m.average)),
            reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub manifest: Manifest,
    pub seeds: u64,
    pub rows: Vec<Row>,
}

/// Trains and evaluates one configuration, returning its held-out report.
pub fn train_and_evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let data = train_set(cfg)?;
    let test = test_set(cfg)?;
    let mut state = TrainState::new(&cfg.model, &cfg.train, data.len())?;
    let mut records: Vec<Record> = Vec::new();
    train(&data, &cfg.train, &cfg.feedback, &mut state, &mut records)?;
    Ok(evaluate_model(&state.model, &test, &cfg.eval)?)
}

pub fn markdown(rows: &[Row]) -> String {
    let cell = |s: &Option<Stat>| s.as_ref().map_or("n/a".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
    let mut out = String::from("| Configuration | AP | AP small | AP medium | AP large | NME | Pose MAE |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.name,
            cell(&r.ap),
            cell(&r.ap_small),
            cell(&r.ap_medium),
            cell(&r.ap_large),
            cell(&r.nme),
            cell(&r.pose_mae)
        );
    }
    out
}

/// Runs every rung over seeds `0..seeds` and writes `ablation.json` and
/// `ablation.md` into `dir`.
pub fn run_ablate(cfg: &ExperimentConfig, seeds: u64, dir: &Path) -> Result<Ablation> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(RUNGS.len());
    for (rung, name) in RUNGS.iter().enumerate() {
        let mut reports = Vec::new();
        for seed in 0..seeds {
            let report = train_and_evaluate(&rung_config(cfg, rung, seed))?;
            log::info!("{name} seed {seed}: AP {:?}", report.ap);
            reports.push(report);
        }
        rows.push(Row::new(name, reports));
    }
    let table = markdown(&rows);
    print!("{table}");
    std::fs::write(dir.join("ablation.md"), &table)?;
    let ablation = Ablation {
        manifest: Manifest::new("ablate", cfg),
        seeds,
        rows,
    };
    write_json(&dir.join("ablation.json"), &ablation)?;
    Ok(ablation)
}
