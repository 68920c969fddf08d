//! The trainable detector: a 1×1 trunk shared by every pyramid level, one
//! multi-task head per level, and optional learned loss weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorSet, PyramidSpec};
use crate::error::{Error, Result};
use crate::evaluator::{decode_detections, Detection};
use crate::losses::{LossWeighting, Predictions, UmlParams};
use crate::mth::{gather_predictions, head_backward, head_forward, scatter_gradients, Conv1x1, HeadCache, HeadKind, HeadParams};
use crate::numerics::Grid;
use crate::synthworld::{channel, render_features, stream_seed, Scene};

const STREAM_INIT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side; the pyramid is the standard three-level one.
    pub input_size: usize,
    pub feature_channels: usize,
    pub trunk_channels: usize,
    /// Width of each task branch.
    pub head_channels: usize,
    pub trunk_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            feature_channels: channel::COUNT,
            trunk_channels: 32,
            head_channels: 32,
            trunk_relu: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        PyramidSpec::standard(self.input_size)
            .map_err(|e| Error::InvalidConfig(format!("model.input_size: {e}")))?;
        if self.feature_channels < channel::COUNT {
            return Err(Error::InvalidConfig(format!(
                "model.feature_channels must be at least {}",
                channel::COUNT
            )));
        }
        if self.trunk_channels == 0 || self.head_channels == 0 {
            return Err(Error::InvalidConfig("model.trunk_channels and model.head_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn pyramid(&self) -> Result<PyramidSpec> {
        PyramidSpec::standard(self.input_size)
    }
}

/// Every trainable tensor. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub trunk: Conv1x1<f64>,
    pub heads: Vec<HeadParams<f64>>,
    /// Present when loss weights are learned.
    pub uml: Option<UmlParams<f64>>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.trunk.weight, &self.trunk.bias];
        for h in &self.heads {
            out.extend(h.tensors());
        }
        if let Some(u) = &self.uml {
            out.push(&u.log_vars);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.trunk.weight, &mut self.trunk.bias];
        for h in self.heads.iter_mut() {
            out.extend(h.tensors_mut());
        }
        if let Some(u) = self.uml.as_mut() {
            out.push(&mut u.log_vars);
        }
        out
    }

    /// Names parallel to [`Params::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["trunk.weight".to_string(), "trunk.bias".to_string()];
        for (l, h) in self.heads.iter().enumerate() {
            out.extend(h.tensor_names().into_iter().map(|n| format!("level{l}.{n}")));
        }
        if self.uml.is_some() {
            out.push("uml.log_vars".to_string());
        }
        out
    }

    /// Whether weight decay applies to each tensor; loss weights are exempt.
    pub fn decayed(&self) -> Vec<bool> {
        let n = self.tensors().len();
        (0..n).map(|i| !(self.uml.is_some() && i == n - 1)).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        Ok(())
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors().concat().iter().position(|v| !v.is_finite())
    }
}

/// Activations of one scene's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Vec<Grid<f64>>,
    trunk_pre: Vec<Grid<f64>>,
    heads: Vec<HeadCache<f64>>,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub kind: HeadKind,
    pub params: Params,
    pub velocity: Params,
    spec: PyramidSpec,
    anchors: AnchorSet<f64>,
}

impl ModelState {
    /// Zero parameters with identity stitches and `s = 0`.
    pub fn zeros(config: &ModelConfig, kind: HeadKind, uml: bool) -> Result<Self> {
        config.validate()?;
        let spec = config.pyramid()?;
        let anchors = generate_anchors(&spec)?;
        let heads = (0..spec.levels.len())
            .map(|_| HeadParams::zeros(kind, config.trunk_channels, config.head_channels))
            .collect();
        let params = Params {
            trunk: Conv1x1::zeros(config.feature_channels, config.trunk_channels),
            heads,
            uml: uml.then(UmlParams::default),
        };
        Ok(Self {
            config: config.clone(),
            kind,
            velocity: params.zeros_like(),
            params,
            spec,
            anchors,
        })
    }

    /// Weights uniform in `±1/√fan_in`, zero biases, identity stitches,
    /// `s = 0`. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, kind: HeadKind, uml: bool, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config, kind, uml)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, STREAM_INIT));
        let mut fill = |conv: &mut Conv1x1<f64>| {
            let bound = 1.0 / (conv.in_channels as f64).sqrt();
            for w in conv.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        };
        fill(&mut model.params.trunk);
        for head in model.params.heads.iter_mut() {
            for b in head.branches.iter_mut() {
                fill(b);
            }
            for o in head.outputs.iter_mut() {
                fill(o);
            }
        }
        Ok(model)
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.spec
    }

    pub fn anchors(&self) -> &AnchorSet<f64> {
        &self.anchors
    }

    /// Learned weights when present, the fixed heuristic ones otherwise.
    pub fn weighting(&self) -> LossWeighting<f64> {
        match self.params.uml {
            Some(p) => LossWeighting::Uncertainty(p),
            None => LossWeighting::heuristic(),
        }
    }

    pub fn render(&self, scene: &Scene) -> Result<Vec<Grid<f64>>> {
        render_features(scene, &self.spec, self.config.feature_channels)
    }

    pub fn forward(&self, features: Vec<Grid<f64>>) -> Result<(Predictions<f64>, ForwardCache)> {
        if features.len() != self.params.heads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature levels for {} heads",
                features.len(),
                self.params.heads.len()
            )));
        }
        let mut trunk_pre = Vec::with_capacity(features.len());
        let mut heads = Vec::with_capacity(features.len());
        let mut outputs = Vec::with_capacity(features.len());
        for (feat, head) in features.iter().zip(&self.params.heads) {
            let pre = self.params.trunk.forward(feat)?;
            let act = if self.config.trunk_relu {
                let mut a = pre.clone();
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                pre.clone()
            };
            let (out, cache) = head_forward(head, &act)?;
            trunk_pre.push(pre);
            heads.push(cache);
            outputs.push(out);
        }
        let preds = gather_predictions(&self.anchors, &outputs)?;
        Ok((
            preds,
            ForwardCache {
                features,
                trunk_pre,
                heads,
            },
        ))
    }

    /// Accumulates the parameter gradient of a loss whose gradient w.r.t.
    /// this scene's predictions is `d_preds`.
    pub fn backward(&self, cache: &ForwardCache, d_preds: &Predictions<f64>, grads: &mut Params) -> Result<()> {
        let upstream = scatter_gradients(&self.anchors, d_preds);
        for (l, up) in upstream.iter().enumerate() {
            let head = &self.params.heads[l];
            let (mut d_act, head_grads) = head_backward(head, &cache.heads[l], up)?;
            for (g, d) in grads.heads[l].tensors_mut().into_iter().zip(head_grads.tensors()) {
                for (a, b) in g.iter_mut().zip(d) {
                    *a += b;
                }
            }
            if self.config.trunk_relu {
                for (d, &x) in d_act.data_mut().iter_mut().zip(cache.trunk_pre[l].data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            self.params.trunk.backward(&cache.features[l], &d_act, &mut grads.trunk)?;
        }
        Ok(())
    }

    pub fn predict(&self, scene: &Scene) -> Result<Predictions<f64>> {
        Ok(self.forward(self.render(scene)?)?.0)
    }

    pub fn detect(&self, scene: &Scene, score_threshold: f64, nms_iou: f64, max_detections: usize) -> Result<Vec<Detection>> {
        let preds = self.predict(scene)?;
        Ok(decode_detections(&self.anchors, &preds, score_threshold, nms_iou, max_detections))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mth::StitchMode;
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(relu: bool) -> ModelConfig {
        ModelConfig {
            trunk_channels: 6,
            head_channels: 5,
            trunk_relu: relu,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = small_config(false);
        let kind = HeadKind::CrossStitch(StitchMode::Gated);
        let a = ModelState::init(&cfg, kind, true, 5).unwrap();
        let b = ModelState::init(&cfg, kind, true, 5).unwrap();
        let c = ModelState::init(&cfg, kind, true, 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params.names().len(), a.params.tensors().len());
        let decayed = a.params.decayed();
        assert!(!decayed[decayed.len() - 1]);
        assert!(decayed[..decayed.len() - 1].iter().all(|d| *d));
    }

    #[test]
    fn flat_round_trip() {
        let m = ModelState::init(&small_config(false), HeadKind::HardShared, false, 1).unwrap();
        let mut p = m.params.zeros_like();
        p.assign_flat(&m.params.flatten()).unwrap();
        assert_eq!(p, m.params);
        assert!(p.assign_flat(&[0.0]).is_err());
    }

    /// Gradient of a random linear functional of the predictions.
    #[test]
    fn backward_matches_finite_differences() {
        for relu in [false, true] {
            let cfg = small_config(relu);
            let model = ModelState::init(&cfg, HeadKind::CrossStitch(StitchMode::Full), false, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let features: Vec<Grid<f64>> = (0..3)
                .map(|l| {
                    let side = model.spec().grid_side(l);
                    let data = (0..cfg.feature_channels * side * side)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    Grid::from_vec(cfg.feature_channels, side, side, data).unwrap()
                })
                .collect();
            let (preds, cache) = model.forward(features.clone()).unwrap();
            let mut probe = preds.clone();
            for (i, v) in probe.cls.iter_mut().chain(probe.boxes.iter_mut()).enumerate() {
                *v = ((i * 37 % 11) as f64 - 5.0) / 7.0;
            }
            probe.landmarks.fill(0.1);
            probe.pose.fill(-0.05);
            let dot = |p: &Predictions<f64>| -> f64 {
                p.cls.iter().zip(&probe.cls).map(|(a, b)| a * b).sum::<f64>()
                    + p.boxes.iter().zip(&probe.boxes).map(|(a, b)| a * b).sum::<f64>()
                    + p.landmarks.iter().zip(&probe.landmarks).map(|(a, b)| a * b).sum::<f64>()
                    + p.pose.iter().zip(&probe.pose).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut grads = model.params.zeros_like();
            model.backward(&cache, &probe, &mut grads).unwrap();
            let theta = model.params.flatten();
            let mut trial = model.clone();
            let report = finite_diff_check(
                |t: &[f64]| {
                    trial.params.assign_flat(t).unwrap();
                    dot(&trial.forward(features.clone()).unwrap().0)
                },
                &theta,
                &grads.flatten(),
            )
            .unwrap();
            assert!(report.passes(1e-5), "relu={relu}: {report:?}");
        }
    }
}
