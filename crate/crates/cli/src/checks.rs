//! `anchors` and `gradcheck`.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mos_core::anchors::{generate_anchors, PyramidSpec, ANCHORS_PER_CELL};
use mos_core::gradcheck::{run_suites, SuiteResult};
use mos_core::AnchorSet64;

/// Prints the per-level layout, checks the count against the closed form
/// and optionally writes every anchor as CSV.
pub fn run_anchors(input_size: usize, out: Option<&Path>) -> Result<usize> {
    let spec = PyramidSpec::standard(input_size)?;
    let anchors: AnchorSet64 = generate_anchors(&spec)?;
    println!("input {input_size}x{input_size}, {ANCHORS_PER_CELL} anchors per cell");
    for (level, layout) in spec.levels.iter().zip(&anchors.levels) {
        println!(
            "  stride {:>2}: {:>3}x{:<3} cells, sizes {:?}, {} anchors",
            layout.stride,
            layout.side,
            layout.side,
            level.sizes,
            layout.len()
        );
    }
    let expected: usize = spec.levels.iter().map(|l| (input_size / l.stride).pow(2) * ANCHORS_PER_CELL).sum();
    println!("total {} anchors", anchors.len());
    if anchors.len() != expected {
        bail!("generated {} anchors, expected {expected}", anchors.len());
    }
    if let Some(path) = out {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        );
        writeln!(w, "index,level,stride,x1,y1,x2,y2")?;
        for (l, layout) in anchors.levels.iter().enumerate() {
            for i in layout.offset..layout.offset + layout.len() {
                let b = anchors.boxes[i];
                writeln!(w, "{i},{l},{},{},{},{},{}", layout.stride, b.x1, b.y1, b.x2, b.y2)?;
            }
        }
        w.flush()?;
    }
    Ok(anchors.len())
}

/// Gradient checks failed; maps to its own exit status.
#[derive(Debug)]
pub struct GradcheckFailed(pub String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn print_suites(results: &[SuiteResult]) {
    println!(
        "{:<18} {:>5} {:>7} {:>12} {:>5} {:>6} {:>9} {:>11}",
        "suite", "seeds", "coords", "max rel err", "worst", "gate", "rounding", "unconfirmed"
    );
    for r in results {
        println!(
            "{:<18} {:>5} {:>7} {:>12.3e} {:>5} {:>6} {:>9} {:>11}",
            r.name,
            r.seeds,
            r.coordinates,
            r.max_rel_error,
            r.worst_seed,
            if r.passed { "pass" } else { "FAIL" },
            r.rounding_limited,
            r.unconfirmed
        );
    }
}

/// Runs the suites. Fails when a coordinate contradicts its analytic
/// gradient, or with `strict` when any coordinate misses the gate.
pub fn run_gradcheck(suites: &[String], seeds: u64, strict: bool, out: Option<&Path>) -> Result<Vec<SuiteResult>> {
    let names: Vec<&str> = suites.iter().map(String::as_str).collect();
    let seeds: Vec<u64> = (0..seeds).collect();
    let results = run_suites(&names, &seeds)?;
    print_suites(&results);
    if let Some(p) = out {
        crate::data::write_json(p, &results)?;
    }
    let unconfirmed: Vec<&str> = results.iter().filter(|r| !r.gradients_confirmed()).map(|r| r.name.as_str()).collect();
    if !unconfirmed.is_empty() {
        return Err(GradcheckFailed(format!("gradients contradicted in {unconfirmed:?}")).into());
    }
    let over_gate: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !over_gate.is_empty() {
        let msg = format!("{over_gate:?} exceed the relative-error gate only on coordinates below the difference's resolution");
        if strict {
            return Err(GradcheckFailed(msg).into());
        }
        println!("note: {msg}");
    }
    Ok(results)
}
