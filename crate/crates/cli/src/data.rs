//! Training and test scenes, generated or read from dataset files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mos_core::synthworld::{generate_scene, read_dataset, write_dataset, Scene};
use mos_core::trainer::Dataset;

use crate::config::{ExperimentConfig, Manifest};

pub fn read_scenes(path: &Path, canvas: usize) -> Result<Vec<Scene>> {
    let file = File::open(path).with_context(|| format!("cannot open dataset file {}", path.display()))?;
    let scenes = read_dataset(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if scenes.is_empty() {
        bail!("dataset file {} holds no scenes", path.display());
    }
    if let Some(s) = scenes.iter().find(|s| s.canvas != canvas) {
        bail!(
            "dataset file {}: scene {} has canvas {}, the configuration expects {canvas}",
            path.display(),
            s.id,
            s.canvas
        );
    }
    Ok(scenes)
}

fn train_scenes(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    match &cfg.data.train_file {
        Some(p) => read_scenes(p, cfg.world.canvas),
        None => Ok((0..cfg.data.train_scenes as u64).map(|i| generate_scene(&cfg.world, i)).collect()),
    }
}

/// Training scenes with the world's label noise applied to their faces.
pub fn train_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(Dataset::from_scenes(&cfg.world, train_scenes(cfg)?))
}

/// Held-out scenes with clean annotations.
pub fn test_set(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    match &cfg.data.test_file {
        Some(p) => read_scenes(p, cfg.world.canvas),
        None => {
            let first = cfg.data.test_first;
            Ok((first..first + cfg.data.test_scenes as u64)
                .map(|i| generate_scene(&cfg.world, i))
                .collect())
        }
    }
}

fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut out = BufWriter::new(file);
    write_dataset(&mut out, scenes)?;
    out.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Writes `train.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let train = train_scenes(cfg)?;
    let test = test_set(cfg)?;
    write_scenes(&dir.join("train.jsonl"), &train)?;
    write_scenes(&dir.join("test.jsonl"), &test)?;
    write_json(&dir.join("manifest.json"), &Manifest::new("gen-data", cfg))?;
    let faces = |s: &[Scene]| s.iter().map(|x| x.faces.len()).sum::<usize>();
    println!(
        "wrote {} training scenes ({} faces) and {} test scenes ({} faces) to {}",
        train.len(),
        faces(&train),
        test.len(),
        faces(&test),
        dir.display()
    );
    Ok(())
}
