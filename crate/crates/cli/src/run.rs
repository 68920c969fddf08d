//! `train`, `eval` and `bench`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mos_core::checkpoint;
use mos_core::evaluator::EvalReport;
use mos_core::synthworld::Scene;
use mos_core::trainer::{evaluate_model, train, train_step, Record, TrainObserver, TrainState};
use mos_core::Error;

use crate::config::{ExperimentConfig, Manifest};
use crate::data::{test_set, train_set, write_json};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "eval.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn save_checkpoint(path: &Path, state: &TrainState, manifest: &Manifest) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let mut out = BufWriter::new(File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?);
    checkpoint::save(&mut out, state, &serde_json::to_value(manifest)?)?;
    out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, Option<Manifest>)> {
    let file = File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    let (state, extra) =
        checkpoint::load(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    Ok((state, serde_json::from_value(extra).ok()))
}

/// Streams records to the metrics file, evaluates and checkpoints at
/// epoch ends.
struct RunObserver<'a> {
    cfg: &'a ExperimentConfig,
    manifest: &'a Manifest,
    metrics: BufWriter<File>,
    test: &'a [Scene],
    last_report: Option<(usize, EvalReport)>,
}

impl RunObserver<'_> {
    fn write(&mut self, record: &Record) -> std::io::Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        writeln!(self.metrics, "{line}")
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.cfg.output.dir.join("checkpoints")
    }
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

impl TrainObserver for RunObserver<'_> {
    fn record(&mut self, record: &Record) -> mos_core::Result<()> {
        self.write(record)?;
        if let Record::Epoch { epoch, mean_total, .. } = record {
            log::info!("epoch {epoch}: mean loss {mean_total:.5}");
        }
        Ok(())
    }

    fn epoch_end(&mut self, state: &TrainState) -> mos_core::Result<()> {
        let epoch = state.epoch;
        let every = self.cfg.output.eval_every;
        let last = epoch == self.cfg.train.epochs;
        if last || (every > 0 && epoch % every == 0) {
            let report = evaluate_model(&state.model, self.test, &self.cfg.eval)?;
            self.write(&Record::Eval {
                epoch: epoch - 1,
                report,
            })?;
            self.last_report = Some((epoch, report));
        }
        self.metrics.flush()?;
        let dir = self.checkpoint_dir();
        save_checkpoint(&dir.join(LAST_CHECKPOINT), state, self.manifest).map_err(io)?;
        let every = self.cfg.output.checkpoint_every;
        if last || (every > 0 && epoch % every == 0) {
            save_checkpoint(&dir.join(format!("epoch-{epoch:03}.ckpt")), state, self.manifest).map_err(io)?;
        }
        Ok(())
    }
}

pub fn print_report(report: &EvalReport) {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "AP {}  (small {}, medium {}, large {})  NME {}  pose MAE {}  on {} scenes / {} faces",
        f(report.ap),
        f(report.ap_small),
        f(report.ap_medium),
        f(report.ap_large),
        f(report.nme),
        f(report.pose_mae.map(|m| m.average)),
        report.scenes,
        report.faces
    );
}

/// Trains from scratch, or continues `resume`, writing the manifest,
/// metrics stream, checkpoints and the final evaluation into the output
/// directory.
pub fn run_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<EvalReport> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("cannot create {}", dir.display()))?;
    let manifest = Manifest::new("train", cfg);
    let data = train_set(cfg)?;
    let test = test_set(cfg)?;

    let mut state = match resume {
        Some(p) => {
            let (state, _) = load_checkpoint(p)?;
            if state.model.config != cfg.model || state.model.kind != cfg.train.head_kind() {
                bail!("checkpoint {} was trained with a different model or head", p.display());
            }
            if state.model.params.uml.is_some() != cfg.train.uml {
                bail!("checkpoint {} disagrees with train.uml", p.display());
            }
            if state.feedback.len() != data.len() {
                bail!(
                    "checkpoint {} covers {} training scenes, the dataset has {}",
                    p.display(),
                    state.feedback.len(),
                    data.len()
                );
            }
            log::info!("resuming from {} after epoch {}", p.display(), state.epoch);
            state
        }
        None => TrainState::new(&cfg.model, &cfg.train, data.len())?,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let metrics_path = dir.join(METRICS_FILE);
    let metrics = if resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .with_context(|| format!("cannot open {}", metrics_path.display()))?;

    let mut observer = RunObserver {
        cfg,
        manifest: &manifest,
        metrics: BufWriter::new(metrics),
        test: &test,
        last_report: None,
    };
    if resume.is_none() {
        save_checkpoint(&observer.checkpoint_dir().join(LAST_CHECKPOINT), &state, &manifest)?;
    }
    let started = Instant::now();
    let outcome = train(&data, &cfg.train, &cfg.feedback, &mut state, &mut observer);
    observer.metrics.flush()?;
    if let Err(e) = outcome {
        if matches!(e, Error::Diverged { .. }) {
            log::error!(
                "last good checkpoint: {}",
                observer.checkpoint_dir().join(LAST_CHECKPOINT).display()
            );
        }
        return Err(e.into());
    }
    log::info!("trained {} epochs in {:.1?}", cfg.train.epochs, started.elapsed());
    let report = match observer.last_report {
        Some((epoch, r)) if epoch == state.epoch => r,
        _ => evaluate_model(&state.model, &test, &cfg.eval)?,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    print_report(&report);
    Ok(report)
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint_path: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let (state, _) = load_checkpoint(checkpoint_path)?;
    if state.model.config.input_size != cfg.world.canvas {
        bail!(
            "checkpoint input size {} does not match world.canvas {}",
            state.model.config.input_size,
            cfg.world.canvas
        );
    }
    let test = test_set(cfg)?;
    let report = evaluate_model(&state.model, &test, &cfg.eval)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    print_report(&report);
    Ok(report)
}

/// Times `steps` training steps after `warmup` untimed ones.
pub fn run_bench(cfg: &ExperimentConfig, steps: usize, warmup: usize) -> Result<()> {
    if steps == 0 {
        bail!("bench needs at least one step");
    }
    let data = train_set(cfg)?;
    let mut state = TrainState::new(&cfg.model, &cfg.train, data.len())?;
    let batch = cfg.train.batch_size.min(data.len());
    let mut times = Vec::with_capacity(steps);
    for i in 0..warmup + steps {
        let start = (i * batch) % data.len();
        let chunk: Vec<_> = (0..batch).map(|k| data.samples[(start + k) % data.len()].clone()).collect();
        let t = Instant::now();
        train_step(&mut state.model, &chunk, &cfg.train, 0, cfg.feedback.small_side)?;
        if i >= warmup {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let median = times[times.len() / 2];
    println!(
        "{steps} steps, batch {batch}, {} parameters: mean {mean:.2} ms, median {median:.2} ms, min {:.2} ms, max {:.2} ms, {:.2} ms per scene",
        state.model.params.len(),
        times[0],
        times[times.len() - 1],
        mean / batch as f64
    );
    Ok(())
}
