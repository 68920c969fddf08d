//! Online feedback: the small-face stitching trigger, the 4-tile mosaic,
//! and epoch-end reweighting of training scenes by their detection errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::synthworld::{stream_seed, Scene};

const STREAM_EPOCH: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    /// Stitch when the small-face share of the box loss falls below this.
    pub ratio_threshold: f64,
    /// Faces whose width and height are both at most this are small.
    pub small_side: f64,
    /// Detections below this score are dropped before counting errors.
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// IoU at which a detection counts as finding a face.
    pub match_iou: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.35,
            small_side: 25.0,
            score_threshold: 0.5,
            nms_iou: 0.4,
            match_iou: 0.5,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold < 1.0) {
            return bad("feedback.ratio_threshold must be in (0, 1)");
        }
        if !(self.small_side > 0.0) {
            return bad("feedback.small_side must be positive");
        }
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou", self.nms_iou),
            ("match_iou", self.match_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("feedback.{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Sampling weights over the training scenes. Every scene keeps weight at
/// least 1, so the set always covers the whole training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSet {
    weights: Vec<u32>,
    epoch: usize,
}

impl FeedbackSet {
    pub fn new(scenes: usize) -> Self {
        Self {
            weights: vec![1; scenes],
            epoch: 0,
        }
    }

    pub fn from_weights(weights: Vec<u32>, epoch: usize) -> Result<Self> {
        if weights.iter().any(|w| *w == 0) {
            return Err(Error::InvalidConfig("feedback weights must be at least 1".into()));
        }
        Ok(Self { weights, epoch })
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.iter().all(|w| *w == 1)
    }

    /// Draws `count` scene indices without replacement from the multiset in
    /// which scene `i` appears `weights[i]` times. The draw depends only on
    /// `(seed, epoch)`, so a resumed run replays it exactly. With uniform
    /// weights and `count == len()` this is a permutation.
    pub fn sample_epoch(&self, count: usize, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch as u64, STREAM_EPOCH));
        let mut remaining: Vec<u64> = self.weights.iter().map(|&w| u64::from(w)).collect();
        let mut total: u64 = remaining.iter().sum();
        let mut out = Vec::with_capacity(count.min(total as usize));
        while out.len() < count && total > 0 {
            let mut r = rng.random_range(0..total);
            let pick = remaining
                .iter()
                .position(|&w| {
                    if r < w {
                        true
                    } else {
                        r -= w;
                        false
                    }
                })
                .expect("draw falls inside the multiset");
            remaining[pick] -= 1;
            total -= 1;
            out.push(pick);
        }
        out
    }

    /// Draws one scene index with probability proportional to its weight.
    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> usize {
        let total: u64 = self.weights.iter().map(|&w| u64::from(w)).sum();
        let mut r = rng.random_range(0..total);
        for (i, &w) in self.weights.iter().enumerate() {
            if r < u64::from(w) {
                return i;
            }
            r -= u64::from(w);
        }
        self.weights.len() - 1
    }
}

/// True when `small / total < threshold`. A batch without box loss never
/// triggers; a batch without small faces has ratio 0 and always does.
pub fn stitch_trigger(small_box_loss: f64, total_box_loss: f64, threshold: f64) -> bool {
    if !(total_box_loss > 0.0) {
        return false;
    }
    small_box_loss / total_box_loss < threshold
}

/// Tiles four equal-size scenes into one canvas at half scale, scene `q`
/// going to quadrant `q` (top-left, top-right, bottom-left, bottom-right).
/// Faces that end up below `landmark_floor` / `pose_floor` lose those
/// annotations but keep their boxes.
pub fn stitch_augment(scenes: [&Scene; 4], landmark_floor: f64, pose_floor: f64) -> Result<Scene> {
    let canvas = scenes[0].canvas;
    if scenes.iter().any(|s| s.canvas != canvas) {
        return Err(Error::ShapeMismatch("stitched scenes need equal canvas sizes".into()));
    }
    let half = canvas as f64 / 2.0;
    let mut faces = Vec::new();
    for (q, scene) in scenes.iter().enumerate() {
        let dx = half * (q % 2) as f64;
        let dy = half * (q / 2) as f64;
        for face in &scene.faces {
            let mut f = face.affine(0.5, dx, dy);
            let side = f.bbox.width().min(f.bbox.height());
            f.landmark_valid &= side >= landmark_floor;
            f.pose_valid &= side >= pose_floor;
            faces.push(f);
        }
    }
    Ok(Scene {
        canvas,
        id: scenes[0].id,
        faces,
    })
}

/// False positives and false negatives of one scene. A detection is a
/// false positive when it overlaps every face below `match_iou`; a face
/// is a false negative when no detection reaches `match_iou` with it.
pub fn count_errors(detections: &[BBox<f64>], faces: &[BBox<f64>], match_iou: f64) -> (usize, usize) {
    let fp = detections
        .iter()
        .filter(|d| faces.iter().all(|f| iou(*d, f) < match_iou))
        .count();
    let fneg = faces
        .iter()
        .filter(|f| detections.iter().all(|d| iou(d, *f) < match_iou))
        .count();
    (fp, fneg)
}

/// New weights after an epoch: `1 + #FP + #FN` per scene, given each
/// scene's thresholded, NMS-filtered detections.
pub fn epoch_feedback(
    set: &FeedbackSet,
    detections: &[Vec<BBox<f64>>],
    faces: &[Vec<BBox<f64>>],
    cfg: &FeedbackConfig,
) -> Result<FeedbackSet> {
    if detections.len() != set.len() || faces.len() != set.len() {
        return Err(Error::ShapeMismatch(format!(
            "feedback over {} scenes got {} detection lists and {} face lists",
            set.len(),
            detections.len(),
            faces.len()
        )));
    }
    let weights = detections
        .iter()
        .zip(faces)
        .map(|(d, f)| {
            let (fp, fneg) = count_errors(d, f, cfg.match_iou);
            u32::try_from(1 + fp + fneg).unwrap_or(u32::MAX)
        })
        .collect();
    Ok(FeedbackSet {
        weights,
        epoch: set.epoch + 1,
    })
}
