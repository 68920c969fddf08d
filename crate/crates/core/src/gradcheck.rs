//! Finite-difference checks of every hand-written backward pass, from the
//! stitch unit up to one full training objective, over many random seeds.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLabel;
use crate::error::Result;
use crate::losses::{
    box_loss, cls_loss, landmark_loss, pose_loss, uml_combine, TaskLosses, UmlParams, CLS_WIDTH, POSE_WIDTH,
};
use crate::model::{ModelConfig, ModelState};
use crate::mth::{head_backward, head_forward, stitch_backward, stitch_forward, HeadKind, HeadParams, StitchMode, StitchWeights, NUM_TASKS};
use crate::pose_codec::{decode_expected, NUM_BINS};
use crate::numerics::{finite_diff_check, GradCheckReport, Grid, GRAD_CHECK_TOLERANCE};
use crate::synthworld::{generate_scene, LabelNoise, WorldConfig};
use crate::trainer::{batch_gradient_on, Dataset, TrainConfig};

/// Coordinates probed per seed in the full-objective suites.
pub const STEP_COORDINATES: usize = 256;

/// Every suite [`run_suites`] knows, in the order it runs them.
pub const SUITES: [&str; 12] = [
    "stitch.full",
    "stitch.gated",
    "head.hard-shared",
    "head.cross-stitch",
    "loss.cls",
    "loss.box",
    "loss.landmarks",
    "loss.pose",
    "uml",
    "step.hard-shared",
    "step.gated",
    "step.full",
];

/// One seed's comparison and how many coordinates it covered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checked {
    /// The central-difference oracle over all coordinates.
    pub report: GradCheckReport<f64>,
    pub coordinates: usize,
    /// Coordinates over the gate whose analytic value a fourth-order
    /// difference at a wider step confirms: the true gradient is too small
    /// for the oracle's step to resolve against the rounding of `f`.
    pub rounding_limited: usize,
    /// Coordinates over the gate that the wider difference does not confirm.
    pub unconfirmed: usize,
}

/// Step of the confirming difference, relative to `max(1, |θ_i|)`.
const WIDE_STEP: f64 = 1e-3;

/// Fourth-order central difference of `f` along coordinate `i`.
fn wide_difference(f: &mut impl FnMut(&[f64]) -> f64, theta: &[f64], i: usize) -> f64 {
    let h = WIDE_STEP * theta[i].abs().max(1.0);
    let mut probe = theta.to_vec();
    let mut at = |d: f64| {
        probe[i] = theta[i] + d;
        f(&probe)
    };
    let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

fn fd(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], analytic: &[f64]) -> Result<Checked> {
    let report = finite_diff_check(&mut f, theta, analytic)?;
    let mut checked = Checked {
        report,
        coordinates: theta.len(),
        rounding_limited: 0,
        unconfirmed: 0,
    };
    if report.passes(GRAD_CHECK_TOLERANCE) {
        return Ok(checked);
    }
    let value = f(theta).abs().max(1.0);
    for i in 0..theta.len() {
        let single = finite_diff_check(
            |t| {
                let mut full = theta.to_vec();
                full[i] = t[0];
                f(&full)
            },
            &theta[i..=i],
            &analytic[i..=i],
        )?;
        if single.passes(GRAD_CHECK_TOLERANCE) {
            continue;
        }
        let wide = wide_difference(&mut f, theta, i);
        // Rounding of f bounds what the wide difference can resolve.
        let slack = 16.0 * f64::EPSILON * value / (WIDE_STEP * theta[i].abs().max(1.0));
        if (analytic[i] - wide).abs() <= GRAD_CHECK_TOLERANCE * (analytic[i].abs() + wide.abs()) + slack {
            checked.rounding_limited += 1;
        } else {
            checked.unconfirmed += 1;
        }
    }
    Ok(checked)
}

/// Worst case of one suite over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub seeds: usize,
    /// Coordinates compared, summed over seeds.
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    /// Every coordinate of every seed is under the relative-error gate.
    pub passed: bool,
    /// Coordinates over the gate, summed over seeds, that are confirmed by
    /// the wider difference, and those that are not.
    pub rounding_limited: usize,
    pub unconfirmed: usize,
}

impl SuiteResult {
    /// No coordinate contradicts its analytic gradient, even where the gate
    /// itself cannot resolve it.
    pub fn gradients_confirmed(&self) -> bool {
        self.unconfirmed == 0
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid<f64> {
    Grid::from_vec(c, h, w, uniform(rng, c * h * w, -1.0, 1.0)).expect("matching length")
}

fn dot(grids: &[Grid<f64>], weights: &[Grid<f64>]) -> f64 {
    grids
        .iter()
        .zip(weights)
        .map(|(g, w)| g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn flatten_grids(grids: &[Grid<f64>]) -> Vec<f64> {
    grids.iter().flat_map(|g| g.data().iter().copied()).collect()
}

fn unflatten_grids(like: &[Grid<f64>], flat: &[f64]) -> Vec<Grid<f64>> {
    let mut at = 0;
    like.iter()
        .map(|g| {
            let (c, h, w) = g.shape();
            let n = c * h * w;
            at += n;
            Grid::from_vec(c, h, w, flat[at - n..at].to_vec()).expect("matching length")
        })
        .collect()
}

/// `Σ upstream · stitch(x; w)` checked w.r.t. both `x` and `w`.
pub fn check_stitch(mode: StitchMode, seed: u64) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (3, 2, 3);
    let xs: Vec<Grid<f64>> = (0..NUM_TASKS).map(|_| random_grid(&mut rng, c, h, w)).collect();
    let mut weights = StitchWeights::identity(mode, c);
    for v in &mut weights.w {
        *v += rng.random_range(-0.5..0.5);
    }
    let up: Vec<Grid<f64>> = (0..NUM_TASKS).map(|_| random_grid(&mut rng, c, h, w)).collect();
    let (dx, dw) = stitch_backward(&xs, &weights, &up)?;

    let n_x = NUM_TASKS * c * h * w;
    let mut theta = flatten_grids(&xs);
    theta.extend_from_slice(&weights.w);
    let mut analytic = flatten_grids(&dx);
    analytic.extend_from_slice(&dw.w);
    fd(
        |t| {
            let x = unflatten_grids(&xs, &t[..n_x]);
            let wt = StitchWeights {
                w: t[n_x..].to_vec(),
                ..weights.clone()
            };
            dot(&stitch_forward(&x, &wt).expect("valid shapes"), &up)
        },
        &theta,
        &analytic,
    )
}

/// One level's head, checked w.r.t. its weights and the trunk features.
pub fn check_head(kind: HeadKind, seed: u64) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, c, h, w) = (3, 4, 2, 2);
    let mut params = HeadParams::zeros(kind, c_in, c);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let trunk = random_grid(&mut rng, c_in, h, w);
    let (outputs, cache) = head_forward(&params, &trunk)?;
    let up: Vec<Grid<f64>> = outputs
        .iter()
        .map(|o| random_grid(&mut rng, o.channels(), h, w))
        .collect();
    let (d_trunk, grads) = head_backward(&params, &cache, &up)?;

    let mut theta: Vec<f64> = params.tensors().concat();
    let n_p = theta.len();
    theta.extend_from_slice(trunk.data());
    let mut analytic: Vec<f64> = grads.tensors().concat();
    analytic.extend_from_slice(d_trunk.data());
    fd(
        |t| {
            let mut p = params.clone();
            let mut at = 0;
            for dst in p.tensors_mut() {
                dst.copy_from_slice(&t[at..at + dst.len()]);
                at += dst.len();
            }
            let x = Grid::from_vec(c_in, h, w, t[n_p..].to_vec()).expect("matching length");
            dot(&head_forward(&p, &x).expect("valid shapes").0, &up)
        },
        &theta,
        &analytic,
    )
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<AnchorLabel> {
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => AnchorLabel::Positive,
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    mask
}

pub fn check_cls_loss(seed: u64) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let logits = uniform(&mut rng, n * CLS_WIDTH, -3.0, 3.0);
    let labels = random_labels(&mut rng, n);
    let selection = random_mask(&mut rng, n);
    let out = cls_loss(&logits, &labels, &selection)?;
    fd(
        |z| cls_loss(z, &labels, &selection).expect("valid shapes").value,
        &logits,
        &out.grad,
    )
}

fn check_regression<const K: usize>(
    seed: u64,
    loss: impl Fn(&[f64], &[[f64; K]], &[bool]) -> crate::losses::LossOutput<f64>,
) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 10;
    let pred = uniform(&mut rng, n * K, -2.0, 2.0);
    let targets: Vec<[f64; K]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
        .collect();
    let mask = random_mask(&mut rng, n);
    let out = loss(&pred, &targets, &mask);
    fd(|p| loss(p, &targets, &mask).value, &pred, &out.grad)
}

pub fn check_box_loss(seed: u64) -> Result<Checked> {
    check_regression::<4>(seed, box_loss)
}

pub fn check_landmark_loss(seed: u64) -> Result<Checked> {
    check_regression::<10>(seed, landmark_loss)
}

/// Targets sit within a degree of the predicted expectation. With large
/// residuals the softmax and squared-error terms of a bin's gradient can
/// cancel to below the rounding floor of the central difference; a unit
/// test against an extrapolated difference covers that regime.
pub fn check_pose_loss(seed: u64) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let logits = uniform(&mut rng, n * POSE_WIDTH, -1.5, 1.5);
    let targets: Vec<[f64; 3]> = (0..n)
        .map(|a| {
            std::array::from_fn(|axis| {
                let start = a * POSE_WIDTH + axis * NUM_BINS;
                decode_expected(&logits[start..start + NUM_BINS]) + rng.random_range(-1.0..1.0)
            })
        })
        .collect();
    let mask = random_mask(&mut rng, n);
    let out = pose_loss(&logits, &targets, &mask)?;
    fd(
        |z| pose_loss(z, &targets, &mask).expect("valid shapes").value,
        &logits,
        &out.grad,
    )
}

/// Combined objective w.r.t. the four task losses and the log-variances.
pub fn check_uml(seed: u64) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = uniform(&mut rng, 4, 0.05, 3.0);
    theta.extend(uniform(&mut rng, 4, -2.0, 2.0));
    let split = |t: &[f64]| {
        (
            TaskLosses::from_array([t[0], t[1], t[2], t[3]]),
            UmlParams {
                log_vars: [t[4], t[5], t[6], t[7]],
            },
        )
    };
    let (l, p) = split(&theta);
    let c = uml_combine(&l, &p);
    let analytic: Vec<f64> = c.d_losses.iter().chain(&c.d_params).copied().collect();
    fd(
        |t| {
            let (l, p) = split(t);
            uml_combine(&l, &p).total
        },
        &theta,
        &analytic,
    )
}

/// The whole training objective (forward, matching targets, OHEM-selected
/// classification, the regression losses and the loss weighting) w.r.t.
/// every kind of model parameter. Matching and OHEM are frozen at the
/// starting point so the objective is smooth; inputs are dense random
/// features so that gradients are not structurally zero. Parameters are
/// sampled: all stitch and loss-weight coordinates plus a random subset.
pub fn check_step(kind: HeadKind, seed: u64) -> Result<Checked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model_cfg = ModelConfig {
        trunk_channels: 4,
        head_channels: 3,
        trunk_relu: seed % 2 == 1,
        ..ModelConfig::default()
    };
    let mut model = ModelState::init(&model_cfg, kind, true, seed)?;
    let mut flat = model.params.flatten();
    for v in &mut flat {
        *v += rng.random_range(-0.1..0.1);
    }
    model.params.assign_flat(&flat)?;
    // Near-uniform bin logits and near-frontal faces keep every pose bin's
    // gradient clear of the cancellation described at `check_pose_loss`.
    // Stitch weights well away from identity, so that levels without
    // positives still pass a visible share of every task into each branch.
    for head in &mut model.params.heads {
        let pose = &mut head.outputs[NUM_TASKS - 1];
        pose.weight.iter_mut().chain(pose.bias.iter_mut()).for_each(|v| *v *= 0.1);
        if let Some(stitch) = head.stitch.as_mut() {
            stitch.w.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let flat = model.params.flatten();

    let world = WorldConfig {
        yaw: [-1.0, 1.0],
        pitch: [-1.0, 1.0],
        roll: [-1.0, 1.0],
        pose_floor: 10.0,
        noise: LabelNoise {
            pose: 0.0,
            ..LabelNoise::default()
        },
        ..WorldConfig::default()
    };
    let batch = Dataset::from_scenes(&world, (0..2).map(|i| generate_scene(&world, seed * 2 + i)).collect()).samples;
    let features: Vec<Vec<Grid<f64>>> = batch
        .iter()
        .map(|s| {
            model.render(&s.scene).map(|levels| {
                levels
                    .iter()
                    .map(|g| {
                        let (c, h, w) = g.shape();
                        random_grid(&mut rng, c, h, w)
                    })
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let small = crate::geometry::SMALL_FACE_SIDE;
    let at = batch_gradient_on(&model, &batch, features.clone(), &cfg, small, None)?;
    let grads = at.grads.flatten();

    // Every loss-weight and stitch coordinate, plus a random sample of the rest.
    let names = model.params.names();
    let mut picked = Vec::new();
    let mut offset = 0;
    for (name, t) in names.iter().zip(model.params.tensors()) {
        if name.starts_with("uml") || name.contains("stitch") {
            picked.extend(offset..offset + t.len());
        }
        offset += t.len();
    }
    picked.extend(index::sample(&mut rng, flat.len(), STEP_COORDINATES.min(flat.len())).into_iter());
    picked.sort_unstable();
    picked.dedup();

    let theta: Vec<f64> = picked.iter().map(|&i| flat[i]).collect();
    let analytic: Vec<f64> = picked.iter().map(|&i| grads[i]).collect();
    let mut probe = model.clone();
    let mut full = flat.clone();
    fd(
        |t| {
            for (&i, &v) in picked.iter().zip(t) {
                full[i] = v;
            }
            probe.params.assign_flat(&full).expect("same length");
            batch_gradient_on(&probe, &batch, features.clone(), &cfg, small, Some(&at.plans))
                .expect("valid batch")
                .total
        },
        &theta,
        &analytic,
    )
}

/// Runs one named suite on one seed.
pub fn check(name: &str, seed: u64) -> Option<Result<Checked>> {
    Some(match name {
        "stitch.full" => check_stitch(StitchMode::Full, seed),
        "stitch.gated" => check_stitch(StitchMode::Gated, seed),
        "head.hard-shared" => check_head(HeadKind::HardShared, seed),
        "head.cross-stitch" => check_head(
            HeadKind::CrossStitch(if seed % 2 == 0 { StitchMode::Full } else { StitchMode::Gated }),
            seed,
        ),
        "loss.cls" => check_cls_loss(seed),
        "loss.box" => check_box_loss(seed),
        "loss.landmarks" => check_landmark_loss(seed),
        "loss.pose" => check_pose_loss(seed),
        "uml" => check_uml(seed),
        "step.hard-shared" => check_step(HeadKind::HardShared, seed),
        "step.gated" => check_step(HeadKind::CrossStitch(StitchMode::Gated), seed),
        "step.full" => check_step(HeadKind::CrossStitch(StitchMode::Full), seed),
        _ => return None,
    })
}

/// Runs `names` (all of [`SUITES`] when empty) over `seeds`.
pub fn run_suites(names: &[&str], seeds: &[u64]) -> Result<Vec<SuiteResult>> {
    let names: Vec<&str> = if names.is_empty() { SUITES.to_vec() } else { names.to_vec() };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let mut worst = (0.0f64, seeds.first().copied().unwrap_or(0));
        let (mut coords, mut limited, mut unconfirmed) = (0, 0, 0);
        for &seed in seeds {
            let c = check(name, seed).ok_or_else(|| {
                crate::Error::InvalidConfig(format!("unknown gradient check suite {name:?}, expected one of {SUITES:?}"))
            })??;
            coords += c.coordinates;
            limited += c.rounding_limited;
            unconfirmed += c.unconfirmed;
            if c.report.max_rel_error > worst.0 || c.report.max_rel_error.is_nan() {
                worst = (c.report.max_rel_error, seed);
            }
        }
        out.push(SuiteResult {
            name: name.to_string(),
            seeds: seeds.len(),
            coordinates: coords,
            max_rel_error: worst.0,
            worst_seed: worst.1,
            passed: worst.0 < GRAD_CHECK_TOLERANCE,
            rounding_limited: limited,
            unconfirmed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_suites_pass_the_gate_on_twenty_seeds() {
        let seeds: Vec<u64> = (0..20).collect();
        let modules: Vec<&str> = SUITES.iter().copied().filter(|n| !n.starts_with("step.")).collect();
        for r in run_suites(&modules, &seeds).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.coordinates >= 20, "{r:?}");
        }
    }

    #[test]
    fn composed_step_gradients_are_confirmed_on_twenty_seeds() {
        let seeds: Vec<u64> = (0..20).collect();
        for r in run_suites(&["step.hard-shared", "step.gated", "step.full"], &seeds).unwrap() {
            assert!(r.gradients_confirmed(), "{r:?}");
            // Rounding-limited coordinates are rare; many would point at a
            // badly conditioned test instance rather than at the oracle.
            assert!(r.rounding_limited * 100 <= r.coordinates, "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let r = fd(|t| t[0] * t[0] + t[1], &[1.5, 0.2], &[3.0 * 1.0001, 1.0]).unwrap();
        assert!(!r.report.passes(GRAD_CHECK_TOLERANCE));
        assert_eq!((r.rounding_limited, r.unconfirmed), (0, 1));
    }

    #[test]
    fn an_unresolvable_gradient_is_rounding_limited() {
        // A true gradient of 1e-9 on a function of size 1e3: the unit-step
        // difference sees only rounding, the wide one recovers the slope.
        let r = fd(|t| 1e3 + 1e-9 * t[0] + t[1], &[0.3, 0.0], &[1e-9, 1.0]).unwrap();
        assert!(!r.report.passes(GRAD_CHECK_TOLERANCE));
        assert_eq!((r.rounding_limited, r.unconfirmed), (1, 0));
    }

    /// Wide-range pose inputs against a fourth-order difference at a larger
    /// step, where rounding noise is far below the gradients involved.
    #[test]
    fn pose_loss_matches_extrapolated_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let logits = uniform(&mut rng, n * POSE_WIDTH, -2.0, 2.0);
            let targets: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-95.0..95.0)))
                .collect();
            let mask = vec![true; n];
            let f = |z: &[f64]| pose_loss(z, &targets, &mask).unwrap().value;
            let grad = pose_loss(&logits, &targets, &mask).unwrap().grad;
            let mut z = logits.clone();
            for i in 0..z.len() {
                let mut diff = |h: f64| {
                    z[i] = logits[i] + h;
                    let plus = f(&z);
                    z[i] = logits[i] - h;
                    let minus = f(&z);
                    z[i] = logits[i];
                    (plus - minus) / (2.0 * h)
                };
                let numeric = (4.0 * diff(1e-3) - diff(2e-3)) / 3.0;
                let err = (grad[i] - numeric).abs();
                assert!(err < 1e-9 + 1e-6 * numeric.abs(), "seed {seed} index {i}: {} vs {numeric}", grad[i]);
            }
        }
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(check("nope", 0).is_none());
        assert!(run_suites(&["nope"], &[0]).is_err());
    }
}
