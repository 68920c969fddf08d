//! Deterministic synthetic scenes and the pyramid features a backbone
//! would extract from them.
//!
//! Faces carry a box, five landmarks derived from a rotated 3D template,
//! and a head pose. Features are sums of per-face Gaussian bumps whose
//! channel amplitudes encode presence, scale, box geometry, landmark
//! offsets and pose, so every task is learnable by the head.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::PyramidSpec;
use crate::error::{Error, Result};
use crate::geometry::{face_scale, BBox, Face, LandmarkSet};
use crate::numerics::Grid;

/// Five-point template in face-size units relative to the face center:
/// `(x, y, depth)`, image y pointing down, depth toward the camera.
pub const LANDMARK_TEMPLATE: [[f64; 3]; 5] = [
    [-0.2, -0.1, 0.0],
    [0.2, -0.1, 0.0],
    [0.0, 0.08, 0.2],
    [-0.15, 0.25, 0.05],
    [0.15, 0.25, 0.05],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeBand {
    /// Face side range in pixels.
    pub min: f64,
    pub max: f64,
    /// Relative sampling weight.
    pub weight: f64,
}

/// Std of the annotation noise injected into training labels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelNoise {
    /// Box corner jitter as a fraction of the face scale.
    pub bbox: f64,
    /// Landmark jitter as a fraction of the face scale.
    pub landmarks: f64,
    /// Pose jitter in degrees.
    pub pose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub canvas: usize,
    pub bands: Vec<SizeBand>,
    pub min_faces: usize,
    pub max_faces: usize,
    pub yaw: [f64; 2],
    pub pitch: [f64; 2],
    pub roll: [f64; 2],
    /// Height is width times `1 ± aspect_jitter`.
    pub aspect_jitter: f64,
    /// Faces with a side below this carry no pose annotation.
    pub pose_floor: f64,
    /// Faces with a side below this carry no landmark annotation.
    pub landmark_floor: f64,
    /// Minimum pixel gap between face boxes.
    pub min_gap: f64,
    pub max_attempts: usize,
    pub noise: LabelNoise,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            bands: vec![
                SizeBand {
                    min: 10.0,
                    max: 25.0,
                    weight: 1.0,
                },
                SizeBand {
                    min: 25.0,
                    max: 56.0,
                    weight: 1.0,
                },
            ],
            min_faces: 1,
            max_faces: 1,
            yaw: [-60.0, 60.0],
            pitch: [-30.0, 30.0],
            roll: [-30.0, 30.0],
            aspect_jitter: 0.1,
            pose_floor: 35.0,
            landmark_floor: 8.0,
            min_gap: 2.0,
            max_attempts: 50,
            noise: LabelNoise::default(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.canvas == 0 {
            return bad("world.canvas must be positive".into());
        }
        if self.bands.is_empty() {
            return bad("world.bands must not be empty".into());
        }
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.min > 0.0 && b.max >= b.min && b.max < self.canvas as f64) {
                return bad(format!(
                    "world.bands[{i}] needs 0 < min <= max < canvas, got [{}, {}]",
                    b.min, b.max
                ));
            }
            if !(b.weight >= 0.0 && b.weight.is_finite()) {
                return bad(format!("world.bands[{i}].weight must be >= 0"));
            }
        }
        if self.bands.iter().all(|b| b.weight == 0.0) {
            return bad("world.bands need a positive weight".into());
        }
        if self.min_faces > self.max_faces {
            return bad("world.min_faces must not exceed world.max_faces".into());
        }
        for (name, r) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll)] {
            if !(r[0] <= r[1] && r[0] >= -99.0 && r[1] < 99.0) {
                return bad(format!("world.{name} must be an ordered range inside [-99, 99)"));
            }
        }
        if !(0.0..0.5).contains(&self.aspect_jitter) {
            return bad("world.aspect_jitter must be in [0, 0.5)".into());
        }
        let n = self.noise;
        if [n.bbox, n.landmarks, n.pose].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("world.noise std values must be >= 0".into());
        }
        Ok(())
    }
}

/// A ground-truth world: clean face annotations on a square canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: usize,
    pub id: u64,
    pub faces: Vec<Face<f64>>,
}

/// Mixes `(seed, index, stream)` into one RNG seed.
pub(crate) fn stream_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED69);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SCENE: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Landmarks of a face: the template rotated by yaw (about y), pitch
/// (about x) and roll (about the view axis), projected orthographically
/// and scaled into the box.
pub fn project_landmarks(bbox: &BBox<f64>, pose: [f64; 3]) -> LandmarkSet<f64> {
    let [yaw, pitch, roll] = pose.map(f64::to_radians);
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let (fcx, fcy) = bbox.center();
    let (w, h) = (bbox.width(), bbox.height());
    let mut points = [[0.0; 2]; 5];
    for (dst, &[x, y, z]) in points.iter_mut().zip(&LANDMARK_TEMPLATE) {
        // yaw
        let (x1, z1) = (x * cy + z * sy, -x * sy + z * cy);
        // pitch
        let y2 = y * cp - z1 * sp;
        // roll
        let (x3, y3) = (x1 * cr - y2 * sr, x1 * sr + y2 * cr);
        *dst = [fcx + x3 * w, fcy + y3 * h];
    }
    LandmarkSet { points }
}

fn make_face(cfg: &WorldConfig, bbox: BBox<f64>, pose: [f64; 3]) -> Face<f64> {
    let side = bbox.width().min(bbox.height());
    Face {
        bbox,
        landmarks: project_landmarks(&bbox, pose),
        pose,
        landmark_valid: side >= cfg.landmark_floor,
        pose_valid: side >= cfg.pose_floor,
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Deterministic in `(cfg.seed, index)`. Placements that overlap an
/// existing face are retried up to `cfg.max_attempts` times; a face that
/// still does not fit is dropped.
pub fn generate_scene(cfg: &WorldConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, index, STREAM_SCENE));
    let canvas = cfg.canvas as f64;
    let total_weight: f64 = cfg.bands.iter().map(|b| b.weight).sum();
    let count = rng.random_range(cfg.min_faces..=cfg.max_faces);
    let mut faces: Vec<Face<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..cfg.max_attempts.max(1) {
            let mut pick = rng.random_range(0.0..total_weight);
            let band = cfg
                .bands
                .iter()
                .find(|b| {
                    pick -= b.weight;
                    pick < 0.0
                })
                .unwrap_or(&cfg.bands[cfg.bands.len() - 1]);
            let w = uniform(&mut rng, [band.min.ln(), band.max.ln()]).exp();
            let h = (w * (1.0 + uniform(&mut rng, [-cfg.aspect_jitter, cfg.aspect_jitter]))).min(canvas - 1.0);
            let x1 = uniform(&mut rng, [0.0, canvas - w]);
            let y1 = uniform(&mut rng, [0.0, canvas - h]);
            let pose = [
                uniform(&mut rng, cfg.yaw),
                uniform(&mut rng, cfg.pitch),
                uniform(&mut rng, cfg.roll),
            ];
            let Ok(bbox) = BBox::new(x1, y1, x1 + w, y1 + h) else {
                continue;
            };
            let g = cfg.min_gap;
            let clear = faces.iter().all(|f| {
                bbox.x1 >= f.bbox.x2 + g || f.bbox.x1 >= bbox.x2 + g || bbox.y1 >= f.bbox.y2 + g || f.bbox.y1 >= bbox.y2 + g
            });
            if clear {
                faces.push(make_face(cfg, bbox, pose));
                break;
            }
        }
    }
    Scene {
        canvas: cfg.canvas,
        id: index,
        faces,
    }
}

/// Training annotations for `scene`: the clean faces with the configured
/// label noise, drawn deterministically from the scene id.
pub fn noisy_labels(cfg: &WorldConfig, scene: &Scene) -> Vec<Face<f64>> {
    let n = cfg.noise;
    if n.bbox == 0.0 && n.landmarks == 0.0 && n.pose == 0.0 {
        return scene.faces.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, scene.id, STREAM_NOISE));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    scene
        .faces
        .iter()
        .map(|f| {
            let s = face_scale(&f.bbox);
            let mut jitter = |std: f64| std * std_normal.sample(&mut rng);
            let b = f.bbox;
            let (dx1, dy1, dx2, dy2) = (jitter(n.bbox * s), jitter(n.bbox * s), jitter(n.bbox * s), jitter(n.bbox * s));
            let bbox = BBox::new(b.x1 + dx1, b.y1 + dy1, b.x2 + dx2, b.y2 + dy2).unwrap_or(b);
            let mut landmarks = f.landmarks;
            for p in landmarks.points.iter_mut() {
                p[0] += jitter(n.landmarks * s);
                p[1] += jitter(n.landmarks * s);
            }
            let pose = f.pose.map(|a| a + jitter(n.pose));
            Face {
                bbox,
                landmarks,
                pose,
                ..*f
            }
        })
        .collect()
}

/// Per-level feature layout produced by [`render_features`].
pub mod channel {
    /// Narrow presence bump.
    pub const PRESENCE: usize = 0;
    /// Presence gated by log2-scale radial basis functions.
    pub const SCALE_START: usize = 1;
    pub const SCALE_CENTERS: [f64; 10] = [1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0];
    /// Start of the regression blocks, one per entry of
    /// [`REGRESSION_WIDTHS`](super::REGRESSION_WIDTHS).
    pub const BLOCK_START: usize = 11;
    /// Offsets inside a block: the bump itself, then the signals it carries.
    pub const BUMP: usize = 0;
    pub const CENTER_X: usize = 1;
    pub const CENTER_Y: usize = 2;
    pub const LOG_W: usize = 3;
    pub const LOG_H: usize = 4;
    pub const LANDMARK_START: usize = 5;
    pub const POSE_START: usize = 15;
    pub const BLOCK_LEN: usize = 18;
    pub const COUNT: usize = BLOCK_START + super::REGRESSION_WIDTHS.len() * BLOCK_LEN;
}

/// Bump widths as fractions of the face scale. Regression signals ride on
/// two widths so a linear head can flatten the product near the center.
const PRESENCE_WIDTH: f64 = 0.3;
pub const REGRESSION_WIDTHS: [f64; 2] = [0.5, 1.0];
const SCALE_RBF_WIDTH: f64 = 0.3;

/// One `channels × side × side` grid per pyramid level. Channels beyond
/// [`channel::COUNT`] are zero.
pub fn render_features(scene: &Scene, spec: &PyramidSpec, channels: usize) -> Result<Vec<Grid<f64>>> {
    if scene.canvas != spec.input_size {
        return Err(Error::ShapeMismatch(format!(
            "scene canvas {} does not match pyramid input {}",
            scene.canvas, spec.input_size
        )));
    }
    if channels < channel::COUNT {
        return Err(Error::InvalidConfig(format!(
            "feature channels must be at least {}, got {channels}",
            channel::COUNT
        )));
    }
    let mut levels = Vec::with_capacity(spec.levels.len());
    for (l, level) in spec.levels.iter().enumerate() {
        let side = spec.grid_side(l);
        let stride = level.stride as f64;
        let mut grid = Grid::zeros(channels, side, side);
        for face in &scene.faces {
            deposit(&mut grid, face, stride);
        }
        levels.push(grid);
    }
    Ok(levels)
}

fn deposit(grid: &mut Grid<f64>, face: &Face<f64>, stride: f64) {
    use channel::*;
    let side = grid.height();
    let s = face_scale(&face.bbox);
    let (cx, cy) = face.bbox.center();
    let log_scale = s.log2();
    let presence = 2.0 * (PRESENCE_WIDTH * s).powi(2);
    let spreads = REGRESSION_WIDTHS.map(|w| 2.0 * (w * s).powi(2));
    let scale_rbf = SCALE_CENTERS.map(|m| (-(log_scale - m).powi(2) / (2.0 * SCALE_RBF_WIDTH * SCALE_RBF_WIDTH)).exp());
    let log_w = (face.bbox.width() / stride).ln();
    let log_h = (face.bbox.height() / stride).ln();
    let mut signals = [0.0; BLOCK_LEN];
    for row in 0..side {
        let v = stride * (row as f64 + 0.5);
        for col in 0..side {
            let u = stride * (col as f64 + 0.5);
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            signals[BUMP] = 1.0;
            signals[CENTER_X] = (cx - u) / stride;
            signals[CENTER_Y] = (cy - v) / stride;
            signals[LOG_W] = log_w;
            signals[LOG_H] = log_h;
            for (k, p) in face.landmarks.points.iter().enumerate() {
                signals[LANDMARK_START + 2 * k] = (p[0] - u) / stride;
                signals[LANDMARK_START + 2 * k + 1] = (p[1] - v) / stride;
            }
            for (k, a) in face.pose.iter().enumerate() {
                signals[POSE_START + k] = a / 90.0;
            }
            let mut add = |c: usize, val: f64| {
                let i = grid.index(c, row, col);
                grid.data_mut()[i] += val;
            };
            let gp = (-d2 / presence).exp();
            add(PRESENCE, gp);
            for (k, r) in scale_rbf.iter().enumerate() {
                add(SCALE_START + k, gp * r);
            }
            for (b, spread) in spreads.iter().enumerate() {
                let g = (-d2 / spread).exp();
                for (k, sig) in signals.iter().enumerate() {
                    add(BLOCK_START + b * BLOCK_LEN + k, g * sig);
                }
            }
        }
    }
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: u64,
    canvas: usize,
    faces: Vec<FaceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaceRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    landmarks: [f64; 10],
    pose: [f64; 3],
    landmark_valid: bool,
    pose_valid: bool,
}

/// Writes one JSON object per scene per line.
pub fn write_dataset<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        let rec = SceneRecord {
            id: s.id,
            canvas: s.canvas,
            faces: s
                .faces
                .iter()
                .map(|f| FaceRecord {
                    bbox: [f.bbox.x1, f.bbox.y1, f.bbox.x2, f.bbox.y2],
                    landmarks: f.landmarks.flat(),
                    pose: f.pose,
                    landmark_valid: f.landmark_valid,
                    pose_valid: f.pose_valid,
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("dataset line {}: {e}", n + 1)))?;
        let faces = rec
            .faces
            .iter()
            .map(|f| {
                let [x1, y1, x2, y2] = f.bbox;
                Ok(Face {
                    bbox: BBox::new(x1, y1, x2, y2)?,
                    landmarks: LandmarkSet::new(LandmarkSet::from_flat(&f.landmarks).points)?,
                    pose: f.pose,
                    landmark_valid: f.landmark_valid,
                    pose_valid: f.pose_valid,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", n + 1)))?;
        scenes.push(Scene {
            canvas: rec.canvas,
            id: rec.id,
            faces,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(cx: f64, cy: f64, s: f64) -> BBox<f64> {
        BBox::from_center(cx, cy, s, s).unwrap()
    }

    #[test]
    fn frontal_pose_uses_template() {
        let b = square(30.0, 30.0, 20.0);
        let lm = project_landmarks(&b, [0.0; 3]);
        for (p, t) in lm.points.iter().zip(&LANDMARK_TEMPLATE) {
            assert!((p[0] - (30.0 + 20.0 * t[0])).abs() < 1e-12);
            assert!((p[1] - (30.0 + 20.0 * t[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn yaw_shifts_nose_by_depth_times_sine() {
        let b = square(30.0, 30.0, 20.0);
        let lm = project_landmarks(&b, [30.0, 0.0, 0.0]);
        let expected = 30.0 + 20.0 * LANDMARK_TEMPLATE[2][2] * 30f64.to_radians().sin();
        assert!((lm.points[2][0] - expected).abs() < 1e-12);
        // Toward the right eye.
        assert!(lm.points[2][0] > 30.0);
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = WorldConfig {
            max_faces: 4,
            ..WorldConfig::default()
        };
        for i in 0..50 {
            let a = generate_scene(&cfg, i);
            assert_eq!(a, generate_scene(&cfg, i));
            for f in &a.faces {
                assert!(f.bbox.x1 >= 0.0 && f.bbox.y1 >= 0.0);
                assert!(f.bbox.x2 <= 64.0 && f.bbox.y2 <= 64.0);
                for p in &f.landmarks.points {
                    assert!(f.bbox.contains_point(p[0], p[1]));
                }
                assert_eq!(f.pose_valid, f.bbox.width() >= 35.0 && f.bbox.height() >= 35.0);
            }
        }
        let other = WorldConfig { seed: 9, ..cfg.clone() };
        assert_ne!(generate_scene(&cfg, 3), generate_scene(&other, 3));
    }

    #[test]
    fn noise_free_labels_equal_truth_and_noise_is_deterministic() {
        let cfg = WorldConfig::default();
        let s = generate_scene(&cfg, 5);
        assert_eq!(noisy_labels(&cfg, &s), s.faces);
        let noisy = WorldConfig {
            noise: LabelNoise {
                bbox: 0.05,
                landmarks: 0.15,
                pose: 3.0,
            },
            ..cfg
        };
        let a = noisy_labels(&noisy, &s);
        assert_eq!(a, noisy_labels(&noisy, &s));
        assert_ne!(a, s.faces);
    }

    #[test]
    fn empty_scene_renders_zero() {
        let spec = PyramidSpec::standard(64).unwrap();
        let s = Scene {
            canvas: 64,
            id: 0,
            faces: vec![],
        };
        let g = render_features(&s, &spec, channel::COUNT).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|l| l.data().iter().all(|v| *v == 0.0)));
        assert!(render_features(&s, &PyramidSpec::standard(128).unwrap(), channel::COUNT).is_err());
        assert!(render_features(&s, &spec, 4).is_err());
    }

    fn face_at(b: BBox<f64>) -> Face<f64> {
        Face {
            bbox: b,
            landmarks: project_landmarks(&b, [10.0, 0.0, 0.0]),
            pose: [10.0, 0.0, 0.0],
            landmark_valid: true,
            pose_valid: true,
        }
    }

    #[test]
    fn centered_face_peaks_at_center_cell() {
        let spec = PyramidSpec::standard(64).unwrap();
        // Center (36, 36) sits inside cell (4,4) / (2,2) / (1,1) of each level.
        let s = Scene {
            canvas: 64,
            id: 0,
            faces: vec![face_at(square(36.0, 36.0, 30.0))],
        };
        let grids = render_features(&s, &spec, channel::COUNT).unwrap();
        for (l, g) in grids.iter().enumerate() {
            let plane = g.channel(channel::PRESENCE);
            let arg = (0..plane.len()).max_by(|&a, &b| plane[a].partial_cmp(&plane[b]).unwrap()).unwrap();
            let side = spec.grid_side(l);
            let stride = spec.levels[l].stride as f64;
            let expect = ((36.0 / stride).floor() as usize) * side + (36.0 / stride).floor() as usize;
            assert_eq!(arg, expect, "level {l}");
        }
    }

    #[test]
    fn rendering_superposes() {
        let spec = PyramidSpec::standard(64).unwrap();
        let a = face_at(square(14.0, 14.0, 16.0));
        let b = face_at(square(48.0, 46.0, 20.0));
        let scene = |faces| Scene {
            canvas: 64,
            id: 0,
            faces,
        };
        let c = channel::COUNT + 2;
        let both = render_features(&scene(vec![a, b]), &spec, c).unwrap();
        let ga = render_features(&scene(vec![a]), &spec, c).unwrap();
        let gb = render_features(&scene(vec![b]), &spec, c).unwrap();
        for l in 0..3 {
            let mut sum = ga[l].clone();
            sum.axpy(1.0, &gb[l]).unwrap();
            assert!(sum.max_abs_diff(&both[l]) < 1e-12);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = WorldConfig {
            max_faces: 3,
            ..WorldConfig::default()
        };
        let scenes: Vec<Scene> = (0..10).map(|i| generate_scene(&cfg, i)).collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &scenes).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 10);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, scenes);
        assert!(read_dataset("{\"id\":1}\n".as_bytes()).is_err());
    }

    #[test]
    fn validation_messages() {
        let mut cfg = WorldConfig::default();
        cfg.min_faces = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = WorldConfig::default();
        cfg.yaw = [-120.0, 10.0];
        assert!(cfg.validate().unwrap_err().to_string().contains("world.yaw"));
        assert!(WorldConfig::default().validate().is_ok());
    }
}
