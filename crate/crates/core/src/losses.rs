//! Task losses with analytic gradients, hard negative mining, and the
//! uncertainty-weighted combination of the four task losses.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLabel;
use crate::error::{Error, Result};
use crate::numerics::{smooth_l1_grad, smooth_l1_unchecked, softmax_into, CompensatedSum};
use crate::pose_codec::{self, bin_center, NUM_BINS};
use crate::scalar::Scalar;

/// Weight of the expected-angle squared error inside the pose loss.
pub const POSE_MSE_WEIGHT: f64 = 0.001;

/// Fixed task weights (cls : box : landmarks : pose) of the hard-weighted baseline.
pub const HEURISTIC_WEIGHTS: [f64; 4] = [2.0, 1.0, 1.0, 0.25];

pub const CLS_WIDTH: usize = 2;
pub const BOX_WIDTH: usize = 4;
pub const LANDMARK_WIDTH: usize = 10;
pub const POSE_WIDTH: usize = 3 * NUM_BINS;

/// Per-anchor head outputs, flattened in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T> {
    pub cls: Vec<T>,
    pub boxes: Vec<T>,
    pub landmarks: Vec<T>,
    pub pose: Vec<T>,
}

impl<T: Scalar> Predictions<T> {
    pub fn zeros(anchors: usize) -> Self {
        Self {
            cls: vec![T::zero(); anchors * CLS_WIDTH],
            boxes: vec![T::zero(); anchors * BOX_WIDTH],
            landmarks: vec![T::zero(); anchors * LANDMARK_WIDTH],
            pose: vec![T::zero(); anchors * POSE_WIDTH],
        }
    }

    pub fn len(&self) -> usize {
        self.cls.len() / CLS_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    pub fn cls_at(&self, a: usize) -> &[T] {
        &self.cls[a * CLS_WIDTH..(a + 1) * CLS_WIDTH]
    }

    pub fn box_at(&self, a: usize) -> [T; 4] {
        let mut out = [T::zero(); 4];
        out.copy_from_slice(&self.boxes[a * BOX_WIDTH..(a + 1) * BOX_WIDTH]);
        out
    }

    pub fn landmarks_at(&self, a: usize) -> [T; 10] {
        let mut out = [T::zero(); 10];
        out.copy_from_slice(&self.landmarks[a * LANDMARK_WIDTH..(a + 1) * LANDMARK_WIDTH]);
        out
    }

    /// Logits of one pose axis (0 yaw, 1 pitch, 2 roll) for anchor `a`.
    pub fn pose_axis(&self, a: usize, axis: usize) -> &[T] {
        let start = a * POSE_WIDTH + axis * NUM_BINS;
        &self.pose[start..start + NUM_BINS]
    }

    /// Face probability of anchor `a`.
    pub fn score(&self, a: usize) -> T {
        let z = self.cls_at(a);
        T::one() / (T::one() + (z[0] - z[1]).exp())
    }

    /// Concatenates per-scene predictions in order.
    pub fn concat(parts: &[Predictions<T>]) -> Self {
        let mut out = Self {
            cls: Vec::new(),
            boxes: Vec::new(),
            landmarks: Vec::new(),
            pose: Vec::new(),
        };
        for p in parts {
            out.cls.extend_from_slice(&p.cls);
            out.boxes.extend_from_slice(&p.boxes);
            out.landmarks.extend_from_slice(&p.landmarks);
            out.pose.extend_from_slice(&p.pose);
        }
        out
    }

    /// Splits into consecutive chunks of `anchors` anchors each.
    pub fn split(&self, anchors: usize) -> Vec<Predictions<T>> {
        let n = self.len() / anchors;
        (0..n)
            .map(|s| Self {
                cls: self.cls[s * anchors * CLS_WIDTH..(s + 1) * anchors * CLS_WIDTH].to_vec(),
                boxes: self.boxes[s * anchors * BOX_WIDTH..(s + 1) * anchors * BOX_WIDTH].to_vec(),
                landmarks: self.landmarks
                    [s * anchors * LANDMARK_WIDTH..(s + 1) * anchors * LANDMARK_WIDTH]
                    .to_vec(),
                pose: self.pose[s * anchors * POSE_WIDTH..(s + 1) * anchors * POSE_WIDTH].to_vec(),
            })
            .collect()
    }
}

/// A loss value with its gradient w.r.t. the predictions it consumed, and
/// each anchor's share of the value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub per_anchor: Vec<T>,
}

/// Binary cross-entropy of every anchor against its label (positives are
/// class 1, everything else class 0).
pub fn per_anchor_cls_loss<T: Scalar>(logits: &[T], labels: &[AnchorLabel]) -> Vec<T> {
    labels
        .iter()
        .enumerate()
        .map(|(a, label)| {
            let z = &logits[a * CLS_WIDTH..(a + 1) * CLS_WIDTH];
            let target = usize::from(*label == AnchorLabel::Positive);
            let max = z[0].max(z[1]);
            let lse = max + ((z[0] - max).exp() + (z[1] - max).exp()).ln();
            lse - z[target]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhemConfig {
    /// Negatives kept per positive.
    pub negative_ratio: usize,
    /// Negatives kept when a scene has no positive anchor.
    pub min_negatives: usize,
    /// Classify positives only, keeping no negatives while a positive
    /// exists. For comparison with the mined setting; the classifier then
    /// sees background only in scenes without a positive.
    pub positives_only: bool,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            negative_ratio: 3,
            min_negatives: 3,
            positives_only: false,
        }
    }
}

/// Keeps every positive and the `min(ratio·#pos, #neg)` hardest negatives
/// (none in positives-only mode; `min_negatives` when there is no positive).
/// Equal losses resolve to the lower anchor index.
pub fn ohem_select<T: Scalar>(losses: &[T], labels: &[AnchorLabel], cfg: &OhemConfig) -> Vec<bool> {
    let mut mask: Vec<bool> = labels.iter().map(|l| *l == AnchorLabel::Positive).collect();
    let positives = mask.iter().filter(|m| **m).count();
    let mut negatives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == AnchorLabel::Negative)
        .map(|(i, _)| i)
        .collect();
    let quota = if positives == 0 {
        cfg.min_negatives
    } else if cfg.positives_only {
        0
    } else {
        cfg.negative_ratio * positives
    }
    .min(negatives.len());
    // Total order so a NaN loss (ranked hardest) cannot break the sort.
    negatives.sort_by(|&a, &b| losses[b].as_f64().total_cmp(&losses[a].as_f64()).then(a.cmp(&b)));
    for &i in &negatives[..quota] {
        mask[i] = true;
    }
    mask
}

/// Mean cross-entropy over the selected anchors.
pub fn cls_loss<T: Scalar>(logits: &[T], labels: &[AnchorLabel], selection: &[bool]) -> Result<LossOutput<T>> {
    let n = labels.len();
    if logits.len() != n * CLS_WIDTH || selection.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "cls loss over {n} anchors got {} logits and {} selection flags",
            logits.len(),
            selection.len()
        )));
    }
    let count = selection.iter().filter(|s| **s).count();
    if count == 0 {
        return Err(Error::EmptySelection);
    }
    let denom = T::from_usize_lossy(count);
    let mut grad = vec![T::zero(); logits.len()];
    let mut per_anchor = vec![T::zero(); n];
    let mut total = CompensatedSum::new();
    let mut p = [T::zero(); CLS_WIDTH];
    for a in (0..n).filter(|&a| selection[a]) {
        let z = &logits[a * CLS_WIDTH..(a + 1) * CLS_WIDTH];
        let target = usize::from(labels[a] == AnchorLabel::Positive);
        let log_total = softmax_into(z, &mut p);
        let max = z[0].max(z[1]);
        let ce = max + log_total - z[target];
        per_anchor[a] = ce / denom;
        total.add(ce);
        for c in 0..CLS_WIDTH {
            let y = if c == target { T::one() } else { T::zero() };
            grad[a * CLS_WIDTH + c] = (p[c] - y) / denom;
        }
    }
    Ok(LossOutput {
        value: total.value() / denom,
        grad,
        per_anchor,
    })
}

/// Mean over masked anchors of the summed smooth-L1 over `K` components.
/// No masked anchor gives a zero loss with zero gradient.
pub fn regression_loss<T: Scalar, const K: usize>(
    pred: &[T],
    targets: &[[T; K]],
    mask: &[bool],
) -> LossOutput<T> {
    let n = targets.len();
    debug_assert_eq!(pred.len(), n * K);
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![T::zero(); pred.len()];
    let mut per_anchor = vec![T::zero(); n];
    if count == 0 {
        return LossOutput {
            value: T::zero(),
            grad,
            per_anchor,
        };
    }
    let denom = T::from_usize_lossy(count);
    let mut total = CompensatedSum::new();
    for a in (0..n).filter(|&a| mask[a]) {
        let mut sum = T::zero();
        for k in 0..K {
            let d = pred[a * K + k] - targets[a][k];
            sum += smooth_l1_unchecked(d);
            grad[a * K + k] = smooth_l1_grad(d) / denom;
        }
        per_anchor[a] = sum / denom;
        total.add(sum);
    }
    LossOutput {
        value: total.value() / denom,
        grad,
        per_anchor,
    }
}

pub fn box_loss<T: Scalar>(pred: &[T], targets: &[[T; 4]], mask: &[bool]) -> LossOutput<T> {
    regression_loss(pred, targets, mask)
}

pub fn landmark_loss<T: Scalar>(pred: &[T], targets: &[[T; 10]], mask: &[bool]) -> LossOutput<T> {
    regression_loss(pred, targets, mask)
}

/// Per axis: bin cross-entropy plus `0.001·(expected angle − target)²`,
/// summed over yaw/pitch/roll and averaged over the masked anchors.
pub fn pose_loss<T: Scalar>(logits: &[T], targets: &[[T; 3]], mask: &[bool]) -> Result<LossOutput<T>> {
    let n = targets.len();
    if logits.len() != n * POSE_WIDTH || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "pose loss over {n} anchors got {} logits",
            logits.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![T::zero(); logits.len()];
    let mut per_anchor = vec![T::zero(); n];
    if count == 0 {
        return Ok(LossOutput {
            value: T::zero(),
            grad,
            per_anchor,
        });
    }
    let denom = T::from_usize_lossy(count);
    let beta = T::lit(POSE_MSE_WEIGHT);
    let mut probs = [T::zero(); NUM_BINS];
    let mut total = CompensatedSum::new();
    for a in (0..n).filter(|&a| mask[a]) {
        let mut sum = T::zero();
        for axis in 0..3 {
            let start = a * POSE_WIDTH + axis * NUM_BINS;
            let z = &logits[start..start + NUM_BINS];
            let target = targets[a][axis];
            let bin = pose_codec::encode_bin(target)?;
            let expected = pose_codec::decode_expected_with_probs(z, &mut probs);
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let residual = expected - target;
            sum += lse - z[bin] + beta * residual * residual;
            let g = &mut grad[start..start + NUM_BINS];
            for k in 0..NUM_BINS {
                let onehot = if k == bin { T::one() } else { T::zero() };
                // d expected / d z_k = p_k (c_k - expected)
                let d_expected = probs[k] * (bin_center::<T>(k) - expected);
                g[k] = (probs[k] - onehot + T::lit(2.0) * beta * residual * d_expected) / denom;
            }
        }
        per_anchor[a] = sum / denom;
        total.add(sum);
    }
    Ok(LossOutput {
        value: total.value() / denom,
        grad,
        per_anchor,
    })
}

/// The four task losses, in cls / box / landmark / pose order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLosses<T> {
    pub cls: T,
    pub bbox: T,
    pub landmarks: T,
    pub pose: T,
}

impl<T: Scalar> TaskLosses<T> {
    pub fn as_array(&self) -> [T; 4] {
        [self.cls, self.bbox, self.landmarks, self.pose]
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self {
            cls: v[0],
            bbox: v[1],
            landmarks: v[2],
            pose: v[3],
        }
    }
}

/// Learned log-variances `s = [ln T₁², ln σ₁², ln σ₂², ln σ₃²]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmlParams<T> {
    pub log_vars: [T; 4],
}

impl<T: Scalar> Default for UmlParams<T> {
    fn default() -> Self {
        Self {
            log_vars: [T::zero(); 4],
        }
    }
}

impl<T: Scalar> UmlParams<T> {
    /// Parameters whose effective task weights equal `weights`:
    /// `exp(-s_cls) = w_cls` and `½exp(-s_k) = w_k` for the regressions.
    pub fn from_weights(weights: [T; 4]) -> Self {
        let two = T::lit(2.0);
        Self {
            log_vars: [
                -weights[0].ln(),
                -(two * weights[1]).ln(),
                -(two * weights[2]).ln(),
                -(two * weights[3]).ln(),
            ],
        }
    }

    /// Effective multiplier on each task loss.
    pub fn weights(&self) -> [T; 4] {
        let half = T::lit(0.5);
        let s = self.log_vars;
        [(-s[0]).exp(), half * (-s[1]).exp(), half * (-s[2]).exp(), half * (-s[3]).exp()]
    }

    /// `T₁` for the classifier, `σ_k` for the regressions: `exp(s/2)`.
    pub fn scales(&self) -> [T; 4] {
        self.log_vars.map(|s| (T::lit(0.5) * s).exp())
    }

    /// Closed-form minimizer of [`uml_combine`] over `s` for fixed losses:
    /// `exp(s_cls) = 4·L_cls`, `exp(s_k) = 2·L_k`.
    pub fn stationary(losses: &TaskLosses<T>) -> Self {
        let l = losses.as_array();
        Self {
            log_vars: [
                (T::lit(4.0) * l[0]).ln(),
                (T::lit(2.0) * l[1]).ln(),
                (T::lit(2.0) * l[2]).ln(),
                (T::lit(2.0) * l[3]).ln(),
            ],
        }
    }
}

/// Combined objective and its gradients w.r.t. the task losses and `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combined<T> {
    pub total: T,
    pub d_losses: [T; 4],
    pub d_params: [T; 4],
}

/// `exp(-s_cls)·L_cls + Σ_k ½exp(-s_k)·L_k + ¼·Σ s`.
pub fn uml_combine<T: Scalar>(losses: &TaskLosses<T>, params: &UmlParams<T>) -> Combined<T> {
    let w = params.weights();
    let l = losses.as_array();
    let quarter = T::lit(0.25);
    let mut total = T::zero();
    let mut d_params = [T::zero(); 4];
    for k in 0..4 {
        total += w[k] * l[k];
        d_params[k] = -w[k] * l[k] + quarter;
    }
    total += quarter * params.log_vars.iter().copied().sum::<T>();
    Combined {
        total,
        d_losses: w,
        d_params,
    }
}

/// How the task losses are merged into one objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossWeighting<T> {
    /// Learned log-variance weighting.
    Uncertainty(UmlParams<T>),
    /// Constant per-task multipliers.
    Fixed([T; 4]),
}

impl<T: Scalar> LossWeighting<T> {
    pub fn heuristic() -> Self {
        LossWeighting::Fixed(HEURISTIC_WEIGHTS.map(T::lit))
    }

    pub fn combine(&self, losses: &TaskLosses<T>) -> Combined<T> {
        match self {
            LossWeighting::Uncertainty(p) => uml_combine(losses, p),
            LossWeighting::Fixed(w) => {
                let l = losses.as_array();
                Combined {
                    total: (0..4).map(|k| w[k] * l[k]).sum(),
                    d_losses: *w,
                    d_params: [T::zero(); 4],
                }
            }
        }
    }
}
