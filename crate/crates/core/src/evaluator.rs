//! Detection decoding and held-out metrics: AP with scale splits,
//! landmark NME and pose MAE.

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, decode_landmarks, AnchorSet};
use crate::geometry::{face_scale, iou, BBox, Face, LandmarkSet};
use crate::losses::Predictions;
use crate::pose_codec::decode_expected;

/// Face-scale boundaries between the small, medium and large splits.
pub const SMALL_SPLIT_MAX: f64 = 25.0;
pub const MEDIUM_SPLIT_MAX: f64 = 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox<f64>,
    pub score: f64,
    pub landmarks: LandmarkSet<f64>,
    pub pose: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Detections kept per scene after NMS.
    pub max_detections: usize,
    /// Minimum score of the detections NME and MAE are measured on.
    pub match_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.02,
            nms_iou: 0.4,
            match_iou: 0.5,
            max_detections: 100,
            match_score: 0.5,
        }
    }
}

/// Scores every anchor, keeps those at or above `score_threshold`, and
/// runs greedy NMS. Output is sorted by descending score.
pub fn decode_detections(
    anchors: &AnchorSet<f64>,
    preds: &Predictions<f64>,
    score_threshold: f64,
    nms_iou: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let mut candidates: Vec<Detection> = (0..anchors.len())
        .filter_map(|a| {
            let score = preds.score(a);
            if !(score >= score_threshold) {
                return None;
            }
            let anchor = &anchors.boxes[a];
            let pose = [0, 1, 2].map(|axis| decode_expected(preds.pose_axis(a, axis)));
            Some(Detection {
                bbox: decode_box(anchor, &preds.box_at(a)),
                score,
                landmarks: decode_landmarks(anchor, &preds.landmarks_at(a)),
                pose,
            })
        })
        .collect();
    sort_by_score(&mut candidates);
    nms(candidates, nms_iou, max_detections)
}

fn sort_by_score(dets: &mut [Detection]) {
    // Stable, so equal scores keep anchor order.
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
}

/// Greedy non-maximum suppression over detections sorted by score.
pub fn nms(sorted: Vec<Detection>, iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Outcome of one detection after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Hit(usize),
    Miss,
}

/// Greedy matching in descending score: each detection takes the unmatched
/// face with the highest IoU at or above `threshold`.
fn match_scene(dets: &[(BBox<f64>, f64)], gts: &[BBox<f64>], threshold: f64) -> Vec<Outcome> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap_or(std::cmp::Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![Outcome::Miss; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i].0, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Outcome::Hit(g);
        }
    }
    out
}

/// All-points interpolated average precision at IoU `threshold`.
///
/// `counted[s][g]` selects which ground truths of scene `s` belong to the
/// evaluated split; detections matched to the others are ignored rather
/// than counted as false positives. `None` when the split is empty.
pub fn average_precision_split(
    detections: &[Vec<(BBox<f64>, f64)>],
    gts: &[Vec<BBox<f64>>],
    counted: &[Vec<bool>],
    threshold: f64,
) -> Option<f64> {
    let positives: usize = counted.iter().map(|c| c.iter().filter(|x| **x).count()).sum();
    if positives == 0 {
        return None;
    }
    // (score, is_tp) for every detection that is not ignored.
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for ((dets, gt), cnt) in detections.iter().zip(gts).zip(counted) {
        for (d, outcome) in dets.iter().zip(match_scene(dets, gt, threshold)) {
            match outcome {
                Outcome::Hit(g) if cnt[g] => ranked.push((d.1, true)),
                Outcome::Hit(_) => {}
                Outcome::Miss => ranked.push((d.1, false)),
            }
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    // Precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// AP over every ground truth.
pub fn average_precision(detections: &[Vec<(BBox<f64>, f64)>], gts: &[Vec<BBox<f64>>], threshold: f64) -> Option<f64> {
    let counted: Vec<Vec<bool>> = gts.iter().map(|g| vec![true; g.len()]).collect();
    average_precision_split(detections, gts, &counted, threshold)
}

/// Mean point distance over the face scale of `bbox`.
pub fn landmark_nme(pred: &LandmarkSet<f64>, gt: &LandmarkSet<f64>, bbox: &BBox<f64>) -> f64 {
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    total / 5.0 / face_scale(bbox)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMae {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub average: f64,
}

/// Per-axis mean absolute error in degrees; `None` for no pairs.
pub fn pose_mae(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Option<PoseMae> {
    if pred.is_empty() || pred.len() != gt.len() {
        return None;
    }
    let n = pred.len() as f64;
    let mut axis = [0.0; 3];
    for (p, g) in pred.iter().zip(gt) {
        for k in 0..3 {
            axis[k] += (p[k] - g[k]).abs();
        }
    }
    let [yaw, pitch, roll] = axis.map(|s| s / n);
    Some(PoseMae {
        yaw,
        pitch,
        roll,
        average: (yaw + pitch + roll) / 3.0,
    })
}

/// Which scale split a face belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleSplit {
    Small,
    Medium,
    Large,
}

pub fn scale_split(b: &BBox<f64>) -> ScaleSplit {
    let s = face_scale(b);
    if s < SMALL_SPLIT_MAX {
        ScaleSplit::Small
    } else if s < MEDIUM_SPLIT_MAX {
        ScaleSplit::Medium
    } else {
        ScaleSplit::Large
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub nme: Option<f64>,
    pub pose_mae: Option<PoseMae>,
    pub scenes: usize,
    pub faces: usize,
    pub detections: usize,
    pub small_faces: usize,
    pub medium_faces: usize,
    pub large_faces: usize,
    /// Matched faces contributing to NME and MAE.
    pub landmark_pairs: usize,
    pub pose_pairs: usize,
}

/// Scores decoded detections against the clean ground truth of each scene.
/// NME and MAE use each face's greedy match among detections scoring at
/// least `match_score`, restricted to faces carrying those annotations.
pub fn evaluate(detections: &[Vec<Detection>], faces: &[Vec<Face<f64>>], match_iou: f64, match_score: f64) -> EvalReport {
    let boxes: Vec<Vec<(BBox<f64>, f64)>> = detections
        .iter()
        .map(|d| d.iter().map(|x| (x.bbox, x.score)).collect())
        .collect();
    let gts: Vec<Vec<BBox<f64>>> = faces.iter().map(|f| f.iter().map(|x| x.bbox).collect()).collect();
    let split_mask = |split: ScaleSplit| -> Vec<Vec<bool>> {
        gts.iter()
            .map(|g| g.iter().map(|b| scale_split(b) == split).collect())
            .collect()
    };
    let count = |split: ScaleSplit| gts.iter().flatten().filter(|b| scale_split(b) == split).count();

    let mut nme_sum = 0.0;
    let mut landmark_pairs = 0;
    let mut pose_pred = Vec::new();
    let mut pose_gt = Vec::new();
    for ((dets, fs), gt) in detections.iter().zip(faces).zip(&gts) {
        let confident: Vec<(BBox<f64>, f64)> = dets
            .iter()
            .filter(|d| d.score >= match_score)
            .map(|d| (d.bbox, d.score))
            .collect();
        let kept: Vec<&Detection> = dets.iter().filter(|d| d.score >= match_score).collect();
        for (d, outcome) in kept.iter().zip(match_scene(&confident, gt, match_iou)) {
            let Outcome::Hit(g) = outcome else { continue };
            let face = &fs[g];
            if face.landmark_valid {
                nme_sum += landmark_nme(&d.landmarks, &face.landmarks, &face.bbox);
                landmark_pairs += 1;
            }
            if face.pose_valid {
                pose_pred.push(d.pose);
                pose_gt.push(face.pose);
            }
        }
    }

    EvalReport {
        ap: average_precision(&boxes, &gts, match_iou),
        ap_small: average_precision_split(&boxes, &gts, &split_mask(ScaleSplit::Small), match_iou),
        ap_medium: average_precision_split(&boxes, &gts, &split_mask(ScaleSplit::Medium), match_iou),
        ap_large: average_precision_split(&boxes, &gts, &split_mask(ScaleSplit::Large), match_iou),
        nme: (landmark_pairs > 0).then(|| nme_sum / landmark_pairs as f64),
        pose_mae: pose_mae(&pose_pred, &pose_gt),
        scenes: faces.len(),
        faces: gts.iter().map(Vec::len).sum(),
        detections: detections.iter().map(Vec::len).sum(),
        small_faces: count(ScaleSplit::Small),
        medium_faces: count(ScaleSplit::Medium),
        large_faces: count(ScaleSplit::Large),
        landmark_pairs,
        pose_pairs: pose_pred.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn perfect_detection_is_one() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)]];
        let dets = vec![vec![(gts[0][0], 0.9), (gts[0][1], 0.8)]];
        assert_eq!(average_precision(&dets, &gts, 0.5), Some(1.0));
    }

    #[test]
    fn below_threshold_is_zero() {
        // IoU exactly 0.4.
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let det = bx(0.0, 0.0, 10.0, 4.0);
        assert!((iou(&gt, &det) - 0.4).abs() < 1e-12);
        assert_eq!(average_precision(&[vec![(det, 0.9)]], &[vec![gt]], 0.5), Some(0.0));
    }

    #[test]
    fn five_sixths_example() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)]];
        let dets = vec![vec![(gts[0][0], 0.9), (bx(40.0, 40.0, 50.0, 50.0), 0.8), (gts[0][1], 0.7)]];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_absent() {
        assert_eq!(average_precision(&[vec![]], &[vec![]], 0.5), None);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let dets = vec![vec![(gt, 0.9), (gt, 0.8)]];
        assert_eq!(average_precision(&dets, &[vec![gt]], 0.5), Some(1.0));
        let dets = vec![vec![(gt, 0.8), (gt, 0.9)]];
        assert_eq!(average_precision(&dets, &[vec![gt]], 0.5), Some(1.0));
    }

    #[test]
    fn split_ignores_out_of_split_matches() {
        let small = bx(0.0, 0.0, 10.0, 10.0);
        let large = bx(20.0, 20.0, 60.0, 60.0);
        let gts = vec![vec![small, large]];
        // The large face is found first; for the small split it is ignored.
        let dets = vec![vec![(large, 0.9), (small, 0.5)]];
        let mask = vec![vec![true, false]];
        assert_eq!(average_precision_split(&dets, &gts, &mask, 0.5), Some(1.0));
    }

    #[test]
    fn nme_examples() {
        let gt = LandmarkSet::new([[5.0, 5.0], [15.0, 5.0], [10.0, 10.0], [7.0, 15.0], [13.0, 15.0]]).unwrap();
        let b = bx(0.0, 0.0, 25.0, 25.0);
        assert_eq!(landmark_nme(&gt, &gt, &b), 0.0);
        let shifted = gt.affine(1.0, 3.0, 4.0);
        assert!((landmark_nme(&shifted, &gt, &b) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nme_matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = |rng: &mut ChaCha8Rng| {
            let mut p = [[0.0; 2]; 5];
            for q in p.iter_mut() {
                *q = [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)];
            }
            LandmarkSet::new(p).unwrap()
        };
        let a = pts(&mut rng);
        let g = pts(&mut rng);
        let b = bx(2.0, 3.0, 22.0, 35.0);
        let mut sum = 0.0;
        for i in 0..5 {
            let dx = a.points[i][0] - g.points[i][0];
            let dy = a.points[i][1] - g.points[i][1];
            sum += f64::sqrt(dx * dx + dy * dy);
        }
        let expected = sum / 5.0 / (20.0f64 * 32.0).sqrt();
        assert!((landmark_nme(&a, &g, &b) - expected).abs() < 1e-14);
    }

    #[test]
    fn mae_examples() {
        let gt = vec![[10.0, -20.0, 5.0], [0.0, 0.0, 0.0]];
        let m = pose_mae(&gt, &gt).unwrap();
        assert_eq!((m.yaw, m.pitch, m.roll, m.average), (0.0, 0.0, 0.0, 0.0));
        let biased: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 3.0, p[1], p[2]]).collect();
        let m = pose_mae(&biased, &gt).unwrap();
        assert_eq!((m.yaw, m.average), (3.0, 1.0));
        let mixed = vec![[12.0, -25.0, 5.5], [-1.0, 4.0, 0.0]];
        let m = pose_mae(&mixed, &gt).unwrap();
        assert!((m.yaw - 1.5).abs() < 1e-12);
        assert!((m.pitch - 4.5).abs() < 1e-12);
        assert!((m.roll - 0.25).abs() < 1e-12);
        assert!(pose_mae(&[], &[]).is_none());
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let d = |x: f64, s: f64| Detection {
            bbox: bx(x, 0.0, x + 10.0, 10.0),
            score: s,
            landmarks: LandmarkSet::new([[0.0; 2]; 5]).unwrap(),
            pose: [0.0; 3],
        };
        let kept = nms(vec![d(0.0, 0.9), d(1.0, 0.8), d(30.0, 0.7)], 0.4, 10);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[1].score, 0.7);
    }

    fn random_case(seed: u64) -> (Vec<Vec<(BBox<f64>, f64)>>, Vec<Vec<BBox<f64>>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..3 {
            let g: Vec<BBox<f64>> = (0..rng.random_range(1..4))
                .map(|i| {
                    let x = 30.0 * i as f64;
                    bx(x, 0.0, x + 20.0, 20.0)
                })
                .collect();
            let d: Vec<(BBox<f64>, f64)> = (0..rng.random_range(0..5))
                .map(|_| {
                    let x = rng.random_range(0.0..80.0);
                    (bx(x, 0.0, x + 20.0, 20.0), rng.random_range(0.01..1.0))
                })
                .collect();
            gts.push(g);
            dets.push(d);
        }
        (dets, gts)
    }

    proptest! {
        #[test]
        fn ap_rank_only(seed in 0u64..500, scale in 0.01f64..0.99) {
            let (dets, gts) = random_case(seed);
            let scaled: Vec<Vec<(BBox<f64>, f64)>> =
                dets.iter().map(|d| d.iter().map(|(b, s)| (*b, s * scale)).collect()).collect();
            prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&scaled, &gts, 0.5));
        }

        #[test]
        fn top_false_positive_never_helps(seed in 0u64..500) {
            let (mut dets, gts) = random_case(seed);
            let before = average_precision(&dets, &gts, 0.5).unwrap();
            dets[0].push((bx(200.0, 200.0, 210.0, 210.0), 2.0));
            let after = average_precision(&dets, &gts, 0.5).unwrap();
            prop_assert!(after <= before + 1e-15);
        }

        #[test]
        fn nme_scale_invariant(k in 0.1f64..10.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = [[0.0; 2]; 5];
            let mut g = [[0.0; 2]; 5];
            for i in 0..5 {
                p[i] = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
                g[i] = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
            }
            let (p, g) = (LandmarkSet::new(p).unwrap(), LandmarkSet::new(g).unwrap());
            let b = bx(0.0, 0.0, 20.0, 18.0);
            let base = landmark_nme(&p, &g, &b);
            let scaled = landmark_nme(&p.affine(k, 0.0, 0.0), &g.affine(k, 0.0, 0.0), &b.affine(k, 0.0, 0.0));
            prop_assert!((base - scaled).abs() < 1e-12 * base.max(1.0));
        }
    }
}
