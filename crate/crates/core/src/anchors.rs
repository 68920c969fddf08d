//! Square anchors tiled over the P3–P5 pyramid, ground-truth assignment,
//! and the box / landmark regression codecs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Face, LandmarkSet};
use crate::scalar::Scalar;

/// Anchors per feature cell.
pub const ANCHORS_PER_CELL: usize = 2;

/// Center (and landmark) encoding variance.
pub const CENTER_VARIANCE: f64 = 0.1;
/// Width/height encoding variance.
pub const SIZE_VARIANCE: f64 = 0.2;

/// Largest |t_w|, |t_h| accepted when decoding; keeps `exp` finite.
const SIZE_CODE_CLIP: f64 = 20.0;

const REFERENCE_INPUT: f64 = 640.0;
const REFERENCE_STRIDES: [usize; 3] = [8, 16, 32];
const REFERENCE_SIZES: [[f64; 2]; 3] = [[16.0, 32.0], [64.0, 128.0], [256.0, 512.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    pub sizes: [f64; ANCHORS_PER_CELL],
}

/// Square input pyramid. Aspect ratio is fixed at 1:1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub input_size: usize,
    pub levels: Vec<LevelSpec>,
}

impl PyramidSpec {
    pub fn new(input_size: usize, levels: Vec<LevelSpec>) -> Result<Self> {
        let spec = Self { input_size, levels };
        spec.validate()?;
        Ok(spec)
    }

    /// P3–P5 at strides 8/16/32 with sizes {16,32}/{64,128}/{256,512} at a
    /// 640 input, scaled proportionally for other inputs.
    pub fn standard(input_size: usize) -> Result<Self> {
        let ratio = input_size as f64 / REFERENCE_INPUT;
        let levels = REFERENCE_STRIDES
            .iter()
            .zip(REFERENCE_SIZES)
            .map(|(&stride, sizes)| LevelSpec {
                stride,
                sizes: sizes.map(|s| s * ratio),
            })
            .collect();
        Self::new(input_size, levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::InvalidSpec("input size must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidSpec("at least one pyramid level required".into()));
        }
        for (l, level) in self.levels.iter().enumerate() {
            if level.stride == 0 || self.input_size % level.stride != 0 {
                return Err(Error::InvalidSpec(format!(
                    "input size {} is not divisible by stride {} of level {l}",
                    self.input_size, level.stride
                )));
            }
            if level.sizes.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "level {l} anchor sizes must be positive, got {:?}",
                    level.sizes
                )));
            }
        }
        Ok(())
    }

    pub fn grid_side(&self, level: usize) -> usize {
        self.input_size / self.levels[level].stride
    }

    /// `Σ_level (input/stride)² · anchors per cell`.
    pub fn anchor_count(&self) -> usize {
        (0..self.levels.len())
            .map(|l| self.grid_side(l).pow(2) * ANCHORS_PER_CELL)
            .sum()
    }
}

/// Where one pyramid level's anchors sit in the flat anchor list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelLayout {
    pub stride: usize,
    pub side: usize,
    pub offset: usize,
}

impl LevelLayout {
    pub fn len(&self) -> usize {
        self.side * self.side * ANCHORS_PER_CELL
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }
}

/// Anchors ordered level-major, then row-major cells, then size.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T> {
    pub boxes: Vec<BBox<T>>,
    pub levels: Vec<LevelLayout>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Flat index of anchor `k` in cell `(row, col)` of `level`.
    pub fn index(&self, level: usize, row: usize, col: usize, k: usize) -> usize {
        let l = &self.levels[level];
        l.offset + (row * l.side + col) * ANCHORS_PER_CELL + k
    }
}

pub fn generate_anchors<T: Scalar>(spec: &PyramidSpec) -> Result<AnchorSet<T>> {
    spec.validate()?;
    let mut boxes = Vec::with_capacity(spec.anchor_count());
    let mut levels = Vec::with_capacity(spec.levels.len());
    for (l, level) in spec.levels.iter().enumerate() {
        let side = spec.grid_side(l);
        levels.push(LevelLayout {
            stride: level.stride,
            side,
            offset: boxes.len(),
        });
        let stride = T::from_usize_lossy(level.stride);
        for row in 0..side {
            let cy = stride * (T::from_usize_lossy(row) + T::lit(0.5));
            for col in 0..side {
                let cx = stride * (T::from_usize_lossy(col) + T::lit(0.5));
                for &size in &level.sizes {
                    let s = T::lit(size);
                    boxes.push(BBox::from_center(cx, cy, s, s)?);
                }
            }
        }
    }
    Ok(AnchorSet { boxes, levels })
}

pub fn encode_box<T: Scalar>(anchor: &BBox<T>, gt: &BBox<T>) -> [T; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cv = T::lit(CENTER_VARIANCE);
    let sv = T::lit(SIZE_VARIANCE);
    [
        (gcx - acx) / (aw * cv),
        (gcy - acy) / (ah * cv),
        (gt.width() / aw).ln() / sv,
        (gt.height() / ah).ln() / sv,
    ]
}

pub fn decode_box<T: Scalar>(anchor: &BBox<T>, t: &[T; 4]) -> BBox<T> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cv = T::lit(CENTER_VARIANCE);
    let sv = T::lit(SIZE_VARIANCE);
    let clip = T::lit(SIZE_CODE_CLIP);
    let cx = acx + t[0] * cv * aw;
    let cy = acy + t[1] * cv * ah;
    let w = aw * (t[2].max(-clip).min(clip) * sv).exp();
    let h = ah * (t[3].max(-clip).min(clip) * sv).exp();
    let half = T::lit(0.5);
    BBox {
        x1: cx - half * w,
        y1: cy - half * h,
        x2: cx + half * w,
        y2: cy + half * h,
    }
}

pub fn encode_landmarks<T: Scalar>(anchor: &BBox<T>, lm: &LandmarkSet<T>) -> [T; 10] {
    let (acx, acy) = anchor.center();
    let cv = T::lit(CENTER_VARIANCE);
    let (sx, sy) = (anchor.width() * cv, anchor.height() * cv);
    let mut out = [T::zero(); 10];
    for (i, p) in lm.points.iter().enumerate() {
        out[2 * i] = (p[0] - acx) / sx;
        out[2 * i + 1] = (p[1] - acy) / sy;
    }
    out
}

pub fn decode_landmarks<T: Scalar>(anchor: &BBox<T>, code: &[T; 10]) -> LandmarkSet<T> {
    let (acx, acy) = anchor.center();
    let cv = T::lit(CENTER_VARIANCE);
    let (sx, sy) = (anchor.width() * cv, anchor.height() * cv);
    let mut points = [[T::zero(); 2]; 5];
    for (i, p) in points.iter_mut().enumerate() {
        *p = [acx + code[2 * i] * sx, acy + code[2 * i + 1] * sy];
    }
    LandmarkSet { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// IoU at or above which an anchor is positive.
    pub positive_iou: f64,
    /// Max IoU below which an anchor is negative.
    pub negative_iou: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            negative_iou: 0.3,
        }
    }
}

/// Per-anchor assignment. Targets are zero for anchors that are not positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T> {
    pub labels: Vec<AnchorLabel>,
    pub assigned: Vec<Option<usize>>,
    pub box_targets: Vec<[T; 4]>,
    pub landmark_targets: Vec<[T; 10]>,
    pub pose_targets: Vec<[T; 3]>,
    pub landmark_valid: Vec<bool>,
    pub pose_valid: Vec<bool>,
}

impl<T: Scalar> MatchResult<T> {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == AnchorLabel::Positive).collect()
    }
}

/// Assigns faces to anchors.
///
/// An anchor is positive at IoU ≥ `positive_iou` with some face, negative
/// when its best IoU is below `negative_iou`, ignored otherwise. Each face
/// then claims its own best anchor (lowest index on ties) as a positive, so
/// every face is covered. A face whose best anchor was already claimed by an
/// earlier face takes its best unclaimed one.
pub fn match_anchors<T: Scalar>(
    anchors: &AnchorSet<T>,
    faces: &[Face<T>],
    cfg: &MatchConfig,
) -> Result<MatchResult<T>> {
    if anchors.is_empty() {
        return Err(Error::EmptyInput("anchor set"));
    }
    let n = anchors.len();
    let pos_iou = T::lit(cfg.positive_iou);
    let neg_iou = T::lit(cfg.negative_iou);

    let mut best_face: Vec<Option<usize>> = vec![None; n];
    let mut best_iou = vec![T::zero(); n];
    let mut overlaps = vec![T::zero(); n * faces.len()];
    for (f, face) in faces.iter().enumerate() {
        for (a, anchor) in anchors.boxes.iter().enumerate() {
            let v = iou(anchor, &face.bbox);
            overlaps[f * n + a] = v;
            if v > best_iou[a] {
                best_iou[a] = v;
                best_face[a] = Some(f);
            }
        }
    }

    let mut labels = vec![AnchorLabel::Negative; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    for a in 0..n {
        if best_iou[a] >= pos_iou {
            labels[a] = AnchorLabel::Positive;
            assigned[a] = best_face[a];
        } else if best_iou[a] >= neg_iou {
            labels[a] = AnchorLabel::Ignore;
        }
    }

    let mut claimed = vec![false; n];
    for f in 0..faces.len() {
        let row = &overlaps[f * n..(f + 1) * n];
        let mut pick: Option<usize> = None;
        for (a, &v) in row.iter().enumerate() {
            if claimed[a] {
                continue;
            }
            if pick.map_or(true, |p| v > row[p]) {
                pick = Some(a);
            }
        }
        if let Some(a) = pick {
            claimed[a] = true;
            labels[a] = AnchorLabel::Positive;
            assigned[a] = Some(f);
        }
    }

    let mut result = MatchResult {
        labels,
        assigned,
        box_targets: vec![[T::zero(); 4]; n],
        landmark_targets: vec![[T::zero(); 10]; n],
        pose_targets: vec![[T::zero(); 3]; n],
        landmark_valid: vec![false; n],
        pose_valid: vec![false; n],
    };
    for a in 0..n {
        if let Some(f) = result.assigned[a] {
            let face = &faces[f];
            let anchor = &anchors.boxes[a];
            result.box_targets[a] = encode_box(anchor, &face.bbox);
            result.landmark_targets[a] = encode_landmarks(anchor, &face.landmarks);
            result.pose_targets[a] = face.pose;
            result.landmark_valid[a] = face.landmark_valid;
            result.pose_valid[a] = face.pose_valid;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn face(b: BBox<f64>) -> Face<f64> {
        let (cx, cy) = b.center();
        Face {
            bbox: b,
            landmarks: LandmarkSet { points: [[cx, cy]; 5] },
            pose: [0.0; 3],
            landmark_valid: true,
            pose_valid: true,
        }
    }

    #[test]
    fn paper_pyramid_has_16800_anchors() {
        let spec = PyramidSpec::standard(640).unwrap();
        assert_eq!(spec.anchor_count(), 16800);
        let set = generate_anchors::<f64>(&spec).unwrap();
        assert_eq!(set.len(), 16800);
        assert_eq!(set.levels.iter().map(|l| l.side).collect::<Vec<_>>(), vec![80, 40, 20]);
    }

    #[test]
    fn desk_pyramid_has_168_anchors() {
        let set = generate_anchors::<f64>(&PyramidSpec::standard(64).unwrap()).unwrap();
        assert_eq!(set.len(), 2 * (64 + 16 + 4));
        assert!((set.boxes[0].width() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn single_cell_level() {
        let spec = PyramidSpec::new(32, vec![LevelSpec { stride: 32, sizes: [8.0, 16.0] }]).unwrap();
        let set = generate_anchors::<f64>(&spec).unwrap();
        assert_eq!(set.len(), 2);
        for b in &set.boxes {
            assert_eq!(b.center(), (16.0, 16.0));
        }
        assert_eq!(set.boxes[0].width(), 8.0);
        assert_eq!(set.boxes[1].width(), 16.0);
    }

    #[test]
    fn ordering_is_level_row_col_size() {
        let set = generate_anchors::<f64>(&PyramidSpec::standard(64).unwrap()).unwrap();
        let i = set.index(1, 2, 3, 1);
        assert_eq!(i, 128 + (2 * 4 + 3) * 2 + 1);
        assert_eq!(set.boxes[i].center(), (16.0 * 3.5, 16.0 * 2.5));
        assert!((set.boxes[i].width() - 12.8).abs() < 1e-12);
    }

    #[test]
    fn indivisible_input_rejected() {
        assert!(matches!(PyramidSpec::standard(100), Err(Error::InvalidSpec(_))));
        assert!(PyramidSpec::new(64, vec![]).is_err());
    }

    #[test]
    fn box_codec_examples() {
        let a = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        assert_eq!(encode_box(&a, &a), [0.0; 4]);
        let wide = BBox::from_center(20.0, 20.0, 20.0 * 0.2f64.exp(), 20.0).unwrap();
        let t = encode_box(&a, &wide);
        assert!((t[2] - 1.0).abs() < 1e-12 && t[0].abs() < 1e-12 && t[3] == 0.0);
    }

    #[test]
    fn landmark_codec_examples() {
        let a = BBox::new(0.0, 0.0, 20.0, 20.0).unwrap();
        let centered = LandmarkSet { points: [[10.0, 10.0]; 5] };
        assert_eq!(encode_landmarks(&a, &centered), [0.0; 10]);
        let mut right = centered;
        right.points[2] = [30.0, 10.0];
        let code = encode_landmarks(&a, &right);
        assert!((code[4] - 10.0f64).abs() < 1e-12);
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_target() {
        let set = generate_anchors::<f64>(&PyramidSpec::standard(64).unwrap()).unwrap();
        let a = set.index(1, 1, 1, 1);
        let m = match_anchors(&set, &[face(set.boxes[a])], &MatchConfig::default()).unwrap();
        assert_eq!(m.labels[a], AnchorLabel::Positive);
        assert_eq!(m.box_targets[a], [0.0; 4]);
        assert_eq!(m.assigned[a], Some(0));
    }

    #[test]
    fn forced_match_covers_low_overlap_face() {
        // One anchor of side 10 at (16,16); a 10x10 face shifted so IoU is 0.42.
        let spec = PyramidSpec::new(32, vec![LevelSpec { stride: 32, sizes: [4.0, 10.0] }]).unwrap();
        let set = generate_anchors::<f64>(&spec).unwrap();
        // Overlap 10 * w over 200 - 10w = 0.42  =>  w = 84 / 14.2.
        let w = 84.0 / 14.2;
        let shift = 10.0 - w;
        let f = BBox::new(11.0 + shift, 11.0, 21.0 + shift, 21.0).unwrap();
        let best = iou(&set.boxes[1], &f);
        assert!((best - 0.42).abs() < 1e-12, "{best}");
        let m = match_anchors(&set, &[face(f)], &MatchConfig::default()).unwrap();
        assert_eq!(m.labels[1], AnchorLabel::Positive);
        assert_eq!(m.num_positive(), 1);
    }

    #[test]
    fn distant_anchor_is_negative_and_empty_scene_all_negative() {
        let set = generate_anchors::<f64>(&PyramidSpec::standard(64).unwrap()).unwrap();
        let m = match_anchors(&set, &[], &MatchConfig::default()).unwrap();
        assert!(m.labels.iter().all(|l| *l == AnchorLabel::Negative));

        let f = BBox::new(40.0, 40.0, 56.0, 56.0).unwrap();
        let m = match_anchors(&set, &[face(f)], &MatchConfig::default()).unwrap();
        let low = set
            .boxes
            .iter()
            .position(|b| iou(b, &f) > 0.0 && iou(b, &f) < 0.3)
            .unwrap();
        assert!(iou(&set.boxes[low], &f) < 0.3);
        assert_eq!(m.labels[low], AnchorLabel::Negative);
    }

    #[test]
    fn two_faces_sharing_a_best_anchor_both_get_positives() {
        let spec = PyramidSpec::new(32, vec![LevelSpec { stride: 32, sizes: [4.0, 10.0] }]).unwrap();
        let set = generate_anchors::<f64>(&spec).unwrap();
        let f1 = BBox::new(11.0, 11.0, 21.0, 21.0).unwrap();
        let f2 = BBox::new(12.0, 12.0, 20.0, 20.0).unwrap();
        let m = match_anchors(&set, &[face(f1), face(f2)], &MatchConfig::default()).unwrap();
        assert_eq!(m.assigned[1], Some(0));
        assert_eq!(m.assigned[0], Some(1));
    }

    proptest! {
        #[test]
        fn anchor_count_formula(base in 1usize..12, levels in 1usize..4) {
            let stride_max = 8usize << (levels - 1);
            let input = base * stride_max;
            let spec = PyramidSpec::new(
                input,
                (0..levels).map(|l| LevelSpec { stride: 8 << l, sizes: [1.0, 2.0] }).collect(),
            ).unwrap();
            let set = generate_anchors::<f64>(&spec).unwrap();
            let expected: usize = (0..levels).map(|l| (input / (8 << l)).pow(2) * 2).sum();
            prop_assert_eq!(set.len(), expected);
        }

        #[test]
        fn box_round_trip(
            ax in 0.0f64..100.0, ay in 0.0f64..100.0, aw in 2.0f64..60.0,
            gx in 0.0f64..100.0, gy in 0.0f64..100.0, gw in 1.0f64..80.0, gh in 1.0f64..80.0,
        ) {
            let a = BBox::from_center(ax, ay, aw, aw).unwrap();
            let g = BBox::from_center(gx, gy, gw, gh).unwrap();
            let d = decode_box(&a, &encode_box(&a, &g));
            for (u, v) in [(d.x1, g.x1), (d.y1, g.y1), (d.x2, g.x2), (d.y2, g.y2)] {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn landmark_round_trip(
            ax in 0.0f64..100.0, ay in 0.0f64..100.0, aw in 2.0f64..60.0,
            pts in prop::array::uniform10(-50.0f64..150.0),
        ) {
            let a = BBox::from_center(ax, ay, aw, aw).unwrap();
            let lm = LandmarkSet::from_flat(&pts);
            let back = decode_landmarks(&a, &encode_landmarks(&a, &lm));
            for (u, v) in back.flat().iter().zip(&pts) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn labels_partition_and_cover_faces(
            faces in prop::collection::vec((4.0f64..60.0, 4.0f64..60.0, 4.0f64..40.0), 0..5),
        ) {
            let set = generate_anchors::<f64>(&PyramidSpec::standard(64).unwrap()).unwrap();
            let faces: Vec<Face<f64>> = faces
                .iter()
                .map(|&(x, y, s)| face(BBox::from_center(x, y, s, s).unwrap()))
                .collect();
            let m = match_anchors(&set, &faces, &MatchConfig::default()).unwrap();
            prop_assert_eq!(m.labels.len(), set.len());
            for f in 0..faces.len() {
                prop_assert!(m.assigned.iter().any(|a| *a == Some(f)));
            }
            for (l, a) in m.labels.iter().zip(&m.assigned) {
                prop_assert_eq!(*l == AnchorLabel::Positive, a.is_some());
            }
        }
    }
}
