//! SGD training: batch loss and gradient, the parameter update, and the
//! epoch loop with small-face stitching and feedback reweighting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, AnchorLabel, MatchConfig, MatchResult};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, EvalReport};
use crate::geometry::{is_small_face_with, BBox, Face};
use crate::losses::{
    box_loss, cls_loss, landmark_loss, ohem_select, per_anchor_cls_loss, pose_loss, LossWeighting, OhemConfig, Predictions,
    TaskLosses,
};
use crate::model::{ModelConfig, ModelState, Params};
use crate::mth::{HeadKind, StitchMode};
use crate::numerics::Grid;
use crate::pose_codec::clamp_angle;
use crate::sampler::{epoch_feedback, stitch_augment, stitch_trigger, FeedbackConfig, FeedbackSet};
use crate::synthworld::{generate_scene, noisy_labels, stream_seed, Scene, WorldConfig};

const STREAM_STITCH: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at whose start the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    /// Learning rate for the loss-weight parameters; follows `lr` when unset.
    pub uml_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cross-stitch head instead of one shared branch.
    pub mth: bool,
    pub stitch_mode: StitchMode,
    /// Learned loss weights instead of the fixed heuristic ones.
    pub uml: bool,
    /// Small-face stitching and epoch-end reweighting.
    pub feedback: bool,
    pub seed: u64,
    pub ohem: OhemConfig,
    pub matching: MatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 0.05,
            lr_decay_epochs: vec![45, 54],
            lr_decay: 0.1,
            uml_lr: None,
            momentum: 0.9,
            weight_decay: 0.0005,
            mth: true,
            stitch_mode: StitchMode::Gated,
            uml: true,
            feedback: true,
            seed: 0,
            ohem: OhemConfig::default(),
            matching: MatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if let Some(u) = self.uml_lr {
            if !(u >= 0.0 && u.is_finite()) {
                return bad("train.uml_lr must be >= 0");
            }
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return bad("train.lr_decay_epochs must be sorted");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("train.lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("train.weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(0.0 < self.matching.negative_iou && self.matching.negative_iou <= self.matching.positive_iou && self.matching.positive_iou <= 1.0) {
            return bad("train.matching needs 0 < negative_iou <= positive_iou <= 1");
        }
        Ok(())
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.mth {
            HeadKind::CrossStitch(self.stitch_mode)
        } else {
            HeadKind::HardShared
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    fn uml_lr_at(&self, epoch: usize) -> f64 {
        self.uml_lr.map_or(self.lr_at(epoch), |u| u * self.lr_at(epoch) / self.lr)
    }
}

/// A training example: the clean scene features are rendered from, and the
/// (possibly noisy) annotations the losses see.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub labels: Vec<Face<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Annotation floors reapplied after stitching shrinks faces.
    pub landmark_floor: f64,
    pub pose_floor: f64,
}

impl Dataset {
    /// Scenes `first..first + count` of `world` with its label noise.
    pub fn generate(world: &WorldConfig, first: u64, count: usize) -> Self {
        let scenes: Vec<Scene> = (first..first + count as u64).map(|i| generate_scene(world, i)).collect();
        Self::from_scenes(world, scenes)
    }

    pub fn from_scenes(world: &WorldConfig, scenes: Vec<Scene>) -> Self {
        let samples = scenes
            .into_iter()
            .map(|scene| Sample {
                labels: noisy_labels(world, &scene),
                scene,
            })
            .collect();
        Self {
            samples,
            landmark_floor: world.landmark_floor,
            pose_floor: world.pose_floor,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mosaic of sample `first` with three others.
    fn stitched(&self, ids: [usize; 4]) -> Result<Sample> {
        let scenes = ids.map(|i| &self.samples[i].scene);
        let label_scenes = ids.map(|i| Scene {
            faces: self.samples[i].labels.clone(),
            ..self.samples[i].scene.clone()
        });
        let label_refs = [&label_scenes[0], &label_scenes[1], &label_scenes[2], &label_scenes[3]];
        Ok(Sample {
            scene: stitch_augment(scenes, self.landmark_floor, self.pose_floor)?,
            labels: stitch_augment(label_refs, self.landmark_floor, self.pose_floor)?.faces,
        })
    }
}

/// Anchor assignment and hard-negative selection for one scene. Fixing the
/// plan makes the batch loss a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub matches: MatchResult<f64>,
    pub selection: Vec<bool>,
    /// Per-face small flag, for the stitching trigger.
    pub small: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub losses: TaskLosses<f64>,
    pub total: f64,
    pub grads: Params,
    pub plans: Vec<ScenePlan>,
    pub positives: usize,
    /// Share of the box loss on positives assigned to small faces.
    pub small_box_loss: f64,
}

fn plan_scene(model: &ModelState, labels: &[Face<f64>], preds: &Predictions<f64>, cfg: &TrainConfig, small_side: f64) -> Result<ScenePlan> {
    let faces: Vec<Face<f64>> = labels
        .iter()
        .map(|f| Face {
            pose: f.pose.map(clamp_angle),
            ..*f
        })
        .collect();
    let matches = match_anchors(model.anchors(), &faces, &cfg.matching)?;
    let per_anchor = per_anchor_cls_loss(&preds.cls, &matches.labels);
    let selection = ohem_select(&per_anchor, &matches.labels, &cfg.ohem);
    let small = faces.iter().map(|f| is_small_face_with(&f.bbox, small_side)).collect();
    Ok(ScenePlan {
        matches,
        selection,
        small,
    })
}

/// Batch objective and its gradient w.r.t. every parameter. Losses are
/// averaged over the whole batch; scenes are reduced in order. With `plans`
/// given, matching and OHEM are taken from them instead of recomputed.
pub fn batch_gradient(
    model: &ModelState,
    batch: &[Sample],
    cfg: &TrainConfig,
    small_side: f64,
    plans: Option<&[ScenePlan]>,
) -> Result<BatchGradient> {
    let features = batch
        .iter()
        .map(|s| model.render(&s.scene))
        .collect::<Result<Vec<_>>>()?;
    batch_gradient_on(model, batch, features, cfg, small_side, plans)
}

/// [`batch_gradient`] on caller-supplied input features, one set per sample,
/// in place of the rendered scenes. Labels still come from `batch`.
pub fn batch_gradient_on(
    model: &ModelState,
    batch: &[Sample],
    features: Vec<Vec<Grid<f64>>>,
    cfg: &TrainConfig,
    small_side: f64,
    plans: Option<&[ScenePlan]>,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    if features.len() != batch.len() || plans.is_some_and(|p| p.len() != batch.len()) {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} samples with {} feature sets",
            batch.len(),
            features.len()
        )));
    }
    let mut preds = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    let mut new_plans = Vec::with_capacity(batch.len());
    for (i, (sample, f)) in batch.iter().zip(features).enumerate() {
        let (p, cache) = model.forward(f)?;
        let plan = match plans {
            Some(ps) => ps[i].clone(),
            None => plan_scene(model, &sample.labels, &p, cfg, small_side)?,
        };
        preds.push(p);
        caches.push(cache);
        new_plans.push(plan);
    }

    let all = Predictions::concat(&preds);
    let mut labels = Vec::new();
    let mut selection = Vec::new();
    let mut box_t = Vec::new();
    let mut lm_t = Vec::new();
    let mut pose_t = Vec::new();
    let mut pos = Vec::new();
    let mut lm_mask = Vec::new();
    let mut pose_mask = Vec::new();
    for plan in &new_plans {
        let m = &plan.matches;
        labels.extend_from_slice(&m.labels);
        selection.extend_from_slice(&plan.selection);
        box_t.extend_from_slice(&m.box_targets);
        lm_t.extend_from_slice(&m.landmark_targets);
        pose_t.extend_from_slice(&m.pose_targets);
        for a in 0..m.labels.len() {
            let p = m.labels[a] == AnchorLabel::Positive;
            pos.push(p);
            lm_mask.push(p && m.landmark_valid[a]);
            pose_mask.push(p && m.pose_valid[a]);
        }
    }
    let cls = cls_loss(&all.cls, &labels, &selection)?;
    let bx = box_loss(&all.boxes, &box_t, &pos);
    let lm = landmark_loss(&all.landmarks, &lm_t, &lm_mask);
    let ps = pose_loss(&all.pose, &pose_t, &pose_mask)?;
    let losses = TaskLosses {
        cls: cls.value,
        bbox: bx.value,
        landmarks: lm.value,
        pose: ps.value,
    };
    let weighting = model.weighting();
    let combined = weighting.combine(&losses);
    let w = combined.d_losses;
    let d_all = Predictions {
        cls: cls.grad.iter().map(|g| w[0] * g).collect(),
        boxes: bx.grad.iter().map(|g| w[1] * g).collect(),
        landmarks: lm.grad.iter().map(|g| w[2] * g).collect(),
        pose: ps.grad.iter().map(|g| w[3] * g).collect(),
    };

    let mut grads = model.params.zeros_like();
    let n_anchors = model.anchors().len();
    for (cache, d) in caches.iter().zip(d_all.split(n_anchors)) {
        model.backward(cache, &d, &mut grads)?;
    }
    if let (LossWeighting::Uncertainty(_), Some(u)) = (weighting, grads.uml.as_mut()) {
        u.log_vars = combined.d_params;
    }

    let mut small_box_loss = 0.0;
    for (s, plan) in new_plans.iter().enumerate() {
        for (a, face) in plan.matches.assigned.iter().enumerate() {
            if let Some(f) = face {
                if pos[s * n_anchors + a] && plan.small[*f] {
                    small_box_loss += bx.per_anchor[s * n_anchors + a];
                }
            }
        }
    }
    Ok(BatchGradient {
        losses,
        total: combined.total,
        grads,
        positives: pos.iter().filter(|p| **p).count(),
        plans: new_plans,
        small_box_loss,
    })
}

/// Momentum SGD on one tensor: `v ← μv − lr·(g + wd·θ)`, `θ ← θ + v`.
pub fn momentum_step(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * (g + weight_decay * *t);
        *t += *v;
    }
}

/// [`momentum_step`] on every tensor. Loss-weight parameters use `uml_lr`
/// and no weight decay.
pub fn sgd_update(model: &mut ModelState, grads: &Params, lr: f64, uml_lr: f64, momentum: f64, weight_decay: f64) {
    let decayed = model.params.decayed();
    let n = decayed.len();
    let has_uml = model.params.uml.is_some();
    let grads = grads.tensors();
    let mut velocity = model.velocity.tensors_mut();
    for (i, theta) in model.params.tensors_mut().into_iter().enumerate() {
        let rate = if has_uml && i == n - 1 { uml_lr } else { lr };
        let wd = if decayed[i] { weight_decay } else { 0.0 };
        momentum_step(theta, velocity[i], grads[i], rate, momentum, wd);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: TaskLosses<f64>,
    pub total: f64,
    pub positives: usize,
    pub small_box_loss: f64,
}

/// One forward/backward/update on `batch`. A non-finite loss, gradient or
/// updated parameter leaves the model as it was and reports divergence.
pub fn train_step(
    model: &mut ModelState,
    batch: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
    small_side: f64,
) -> Result<StepReport> {
    let g = batch_gradient(model, batch, cfg, small_side, None)?;
    let diverged = |detail: String| Error::Diverged { epoch, step: 0, detail };
    if !g.total.is_finite() {
        return Err(diverged(format!("non-finite loss, task losses {:?}", g.losses)));
    }
    if let Some(i) = g.grads.first_non_finite() {
        return Err(diverged(format!("non-finite gradient at flat index {i}")));
    }
    let before = model.clone();
    sgd_update(model, &g.grads, cfg.lr_at(epoch), cfg.uml_lr_at(epoch), cfg.momentum, cfg.weight_decay);
    if let Some(i) = model.params.first_non_finite() {
        *model = before;
        return Err(diverged(format!("non-finite parameter at flat index {i} after update")));
    }
    Ok(StepReport {
        losses: g.losses,
        total: g.total,
        positives: g.positives,
        small_box_loss: g.small_box_loss,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        losses: TaskLosses<f64>,
        total: f64,
        positives: usize,
        /// Loss-weight log-variances and the matching `T₁, σ₁, σ₂, σ₃`.
        log_vars: Option<[f64; 4]>,
        scales: Option<[f64; 4]>,
        /// This batch was made of mosaics.
        stitched: bool,
        /// The next batch will be.
        trigger: bool,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        mean_losses: TaskLosses<f64>,
        mean_total: f64,
        stitched_batches: usize,
        /// Sampling weight per training scene for the next epoch.
        feedback_weights: Option<Vec<u32>>,
    },
    Eval {
        epoch: usize,
        report: EvalReport,
    },
}

/// Receives metrics and epoch-end snapshots.
pub trait TrainObserver {
    fn record(&mut self, record: &Record) -> Result<()>;

    fn epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<Record> {
    fn record(&mut self, record: &Record) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    /// Epochs completed.
    pub epoch: usize,
    /// Steps completed.
    pub step: usize,
    pub feedback: FeedbackSet,
    /// The next batch is stitched.
    pub stitch_next: bool,
}

impl TrainState {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, scenes: usize) -> Result<Self> {
        Ok(Self {
            model: ModelState::init(model, cfg.head_kind(), cfg.uml, cfg.seed)?,
            epoch: 0,
            step: 0,
            feedback: FeedbackSet::new(scenes),
            stitch_next: false,
        })
    }
}

/// Runs epochs `state.epoch..cfg.epochs`. On divergence the state holds the
/// last good model and the error is returned.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    fcfg: &FeedbackConfig,
    state: &mut TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate()?;
    if cfg.feedback {
        fcfg.validate()?;
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if state.feedback.len() != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "feedback set covers {} scenes, dataset has {}",
            state.feedback.len(),
            data.len()
        )));
    }
    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = state.feedback.sample_epoch(data.len(), cfg.seed, epoch);
        let mut sums = [0.0; 4];
        let mut total_sum = 0.0;
        let mut batches = 0usize;
        let mut stitched_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let stitched = state.stitch_next;
            let batch: Vec<Sample> = if stitched {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, ((epoch as u64) << 32) | b as u64, STREAM_STITCH));
                chunk
                    .iter()
                    .map(|&i| {
                        let ids = [
                            i,
                            state.feedback.sample_one(&mut rng),
                            state.feedback.sample_one(&mut rng),
                            state.feedback.sample_one(&mut rng),
                        ];
                        data.stitched(ids)
                    })
                    .collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| data.samples[i].clone()).collect()
            };
            let report = train_step(&mut state.model, &batch, cfg, epoch, fcfg.small_side).map_err(|e| match e {
                Error::Diverged { epoch, detail, .. } => Error::Diverged {
                    epoch,
                    step: state.step,
                    detail,
                },
                other => other,
            })?;
            let trigger = cfg.feedback && stitch_trigger(report.small_box_loss, report.losses.bbox, fcfg.ratio_threshold);
            if trigger && report.small_box_loss == 0.0 {
                log::debug!("batch without small-face box loss triggers stitching");
            }
            state.stitch_next = trigger;
            let uml = state.model.params.uml;
            observer.record(&Record::Step {
                epoch,
                step: state.step,
                lr,
                losses: report.losses,
                total: report.total,
                positives: report.positives,
                log_vars: uml.map(|u| u.log_vars),
                scales: uml.map(|u| u.scales()),
                stitched,
                trigger,
            })?;
            state.step += 1;
            for (s, l) in sums.iter_mut().zip(report.losses.as_array()) {
                *s += l;
            }
            total_sum += report.total;
            batches += 1;
            stitched_batches += usize::from(stitched);
        }
        if cfg.feedback {
            let mut detections = Vec::with_capacity(data.len());
            let mut faces = Vec::with_capacity(data.len());
            for s in &data.samples {
                let dets = state.model.detect(&s.scene, fcfg.score_threshold, fcfg.nms_iou, usize::MAX)?;
                detections.push(dets.iter().map(|d| d.bbox).collect::<Vec<BBox<f64>>>());
                faces.push(s.labels.iter().map(|f| f.bbox).collect::<Vec<_>>());
            }
            state.feedback = epoch_feedback(&state.feedback, &detections, &faces, fcfg)?;
        }
        let n = batches.max(1) as f64;
        observer.record(&Record::Epoch {
            epoch,
            lr,
            mean_losses: TaskLosses::from_array(sums.map(|s| s / n)),
            mean_total: total_sum / n,
            stitched_batches,
            feedback_weights: cfg.feedback.then(|| state.feedback.weights().to_vec()),
        })?;
        state.epoch = epoch + 1;
        observer.epoch_end(state)?;
    }
    Ok(())
}

/// Detects on held-out scenes and scores against their clean faces.
pub fn evaluate_model(model: &ModelState, scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut detections = Vec::with_capacity(scenes.len());
    for s in scenes {
        detections.push(model.detect(s, cfg.score_threshold, cfg.nms_iou, cfg.max_detections)?);
    }
    let faces: Vec<Vec<Face<f64>>> = scenes.iter().map(|s| s.faces.clone()).collect();
    Ok(evaluate(&detections, &faces, cfg.match_iou, cfg.match_score))
}
