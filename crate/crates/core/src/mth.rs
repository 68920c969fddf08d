//! Multi-task head: per-task 1×1 branch projections, the channel-wise
//! cross-stitch mixing unit, and per-task 1×1 output projections.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, ANCHORS_PER_CELL};
use crate::error::{Error, Result};
use crate::losses::{Predictions, BOX_WIDTH, CLS_WIDTH, LANDMARK_WIDTH, POSE_WIDTH};
use crate::numerics::Grid;
use crate::scalar::Scalar;

pub const NUM_TASKS: usize = 4;

/// Output channels per anchor for each task: cls, box, landmarks, pose.
pub const TASK_WIDTHS: [usize; NUM_TASKS] = [CLS_WIDTH, BOX_WIDTH, LANDMARK_WIDTH, POSE_WIDTH];

/// Pointwise convolution: `out[o] = bias[o] + Σ_i weight[o, i]·in[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major `out × in`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv1x1<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![T::zero(); in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn forward(&self, input: &Grid<T>) -> Result<Grid<T>> {
        if input.channels() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "1x1 conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let mut out = Grid::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let row = &self.weight[o * self.in_channels..(o + 1) * self.in_channels];
            let dst = out.channel_mut(o);
            dst.fill(self.bias[o]);
            for (i, &wt) in row.iter().enumerate() {
                for (d, &x) in dst.iter_mut().zip(input.channel(i)) {
                    *d += wt * x;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, input: &Grid<T>, upstream: &Grid<T>, grads: &mut Conv1x1<T>) -> Result<Grid<T>> {
        if upstream.channels() != self.out_channels || input.plane() != upstream.plane() {
            return Err(Error::ShapeMismatch(format!(
                "1x1 conv backward: upstream {:?} vs input {:?}",
                upstream.shape(),
                input.shape()
            )));
        }
        let mut grad_in = Grid::zeros(self.in_channels, input.height(), input.width());
        for o in 0..self.out_channels {
            let g = upstream.channel(o);
            grads.bias[o] += g.iter().copied().sum::<T>();
            for i in 0..self.in_channels {
                let x = input.channel(i);
                let mut dot = T::zero();
                for (&gv, &xv) in g.iter().zip(x) {
                    dot += gv * xv;
                }
                grads.weight[o * self.in_channels + i] += dot;
                let wt = self.weight[o * self.in_channels + i];
                for (d, &gv) in grad_in.channel_mut(i).iter_mut().zip(g) {
                    *d += wt * gv;
                }
            }
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StitchMode {
    /// `n × n × c`: every task output is a per-channel mix of all task inputs.
    Full,
    /// `n × c`: each task gates between itself and the mean of the others.
    Gated,
}

/// Cross-stitch mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchWeights<T> {
    pub mode: StitchMode,
    pub channels: usize,
    /// Full: index `(i * n + j) * c + k`. Gated: index `i * c + k`.
    pub w: Vec<T>,
}

impl<T: Scalar> StitchWeights<T> {
    /// Weights that pass every task through unchanged.
    pub fn identity(mode: StitchMode, channels: usize) -> Self {
        match mode {
            StitchMode::Full => {
                let mut w = vec![T::zero(); NUM_TASKS * NUM_TASKS * channels];
                for i in 0..NUM_TASKS {
                    for k in 0..channels {
                        w[(i * NUM_TASKS + i) * channels + k] = T::one();
                    }
                }
                Self { mode, channels, w }
            }
            StitchMode::Gated => Self {
                mode,
                channels,
                w: vec![T::one(); NUM_TASKS * channels],
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            channels: self.channels,
            w: vec![T::zero(); self.w.len()],
        }
    }

    #[inline]
    pub fn full(&self, i: usize, j: usize, k: usize) -> T {
        self.w[(i * NUM_TASKS + j) * self.channels + k]
    }
}

fn check_task_grids<T: Scalar>(xs: &[Grid<T>], channels: usize) -> Result<()> {
    if xs.len() != NUM_TASKS {
        return Err(Error::ShapeMismatch(format!("expected {NUM_TASKS} task grids, got {}", xs.len())));
    }
    if xs.iter().any(|x| !x.same_shape(&xs[0])) {
        return Err(Error::ShapeMismatch("task grids differ in shape".into()));
    }
    if xs[0].channels() != channels {
        return Err(Error::ShapeMismatch(format!(
            "stitch unit has {channels} channels, task grids have {}",
            xs[0].channels()
        )));
    }
    Ok(())
}

/// Per-channel linear combination of the task feature maps.
pub fn stitch_forward<T: Scalar>(xs: &[Grid<T>], w: &StitchWeights<T>) -> Result<Vec<Grid<T>>> {
    check_task_grids(xs, w.channels)?;
    let (c, h, wd) = xs[0].shape();
    let mut out: Vec<Grid<T>> = (0..NUM_TASKS).map(|_| Grid::zeros(c, h, wd)).collect();
    match w.mode {
        StitchMode::Full => {
            for (i, dst_grid) in out.iter_mut().enumerate() {
                for k in 0..c {
                    let dst = dst_grid.channel_mut(k);
                    for (j, x) in xs.iter().enumerate() {
                        let wij = w.full(i, j, k);
                        for (d, &v) in dst.iter_mut().zip(x.channel(k)) {
                            *d += wij * v;
                        }
                    }
                }
            }
        }
        StitchMode::Gated => {
            let others = T::from_usize_lossy(NUM_TASKS - 1);
            for (i, dst_grid) in out.iter_mut().enumerate() {
                for k in 0..c {
                    let g = w.w[i * c + k];
                    let keep = T::one() - g;
                    let dst = dst_grid.channel_mut(k);
                    for (p, d) in dst.iter_mut().enumerate() {
                        let mut rest = T::zero();
                        for (j, x) in xs.iter().enumerate() {
                            if j != i {
                                rest += x.channel(k)[p];
                            }
                        }
                        *d = g * xs[i].channel(k)[p] + keep * (rest / others);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`stitch_forward`] w.r.t. its inputs and weights.
pub fn stitch_backward<T: Scalar>(
    xs: &[Grid<T>],
    w: &StitchWeights<T>,
    upstream: &[Grid<T>],
) -> Result<(Vec<Grid<T>>, StitchWeights<T>)> {
    check_task_grids(xs, w.channels)?;
    check_task_grids(upstream, w.channels)?;
    if !upstream[0].same_shape(&xs[0]) {
        return Err(Error::ShapeMismatch("stitch upstream gradient shape".into()));
    }
    let (c, h, wd) = xs[0].shape();
    let mut dx: Vec<Grid<T>> = (0..NUM_TASKS).map(|_| Grid::zeros(c, h, wd)).collect();
    let mut dw = w.zeros_like();
    match w.mode {
        StitchMode::Full => {
            for (i, g) in upstream.iter().enumerate() {
                for (j, x) in xs.iter().enumerate() {
                    for k in 0..c {
                        let wij = w.full(i, j, k);
                        let gk = g.channel(k);
                        let mut dot = T::zero();
                        for (&gv, &xv) in gk.iter().zip(x.channel(k)) {
                            dot += gv * xv;
                        }
                        dw.w[(i * NUM_TASKS + j) * c + k] += dot;
                        for (d, &gv) in dx[j].channel_mut(k).iter_mut().zip(gk) {
                            *d += wij * gv;
                        }
                    }
                }
            }
        }
        StitchMode::Gated => {
            let others = T::from_usize_lossy(NUM_TASKS - 1);
            for (i, g) in upstream.iter().enumerate() {
                for k in 0..c {
                    let gate = w.w[i * c + k];
                    let spread = (T::one() - gate) / others;
                    let gk = g.channel(k);
                    let mut dot = T::zero();
                    for (p, &gv) in gk.iter().enumerate() {
                        let mut rest = T::zero();
                        for (j, x) in xs.iter().enumerate() {
                            if j != i {
                                rest += x.channel(k)[p];
                            }
                        }
                        dot += gv * (xs[i].channel(k)[p] - rest / others);
                    }
                    dw.w[i * c + k] += dot;
                    for (j, dxj) in dx.iter_mut().enumerate() {
                        let coef = if j == i { gate } else { spread };
                        for (d, &gv) in dxj.channel_mut(k).iter_mut().zip(gk) {
                            *d += coef * gv;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Stitch weights plus the inputs of the last forward pass.
#[derive(Debug, Clone)]
pub struct StitchUnit<T> {
    pub weights: StitchWeights<T>,
    cache: Option<Vec<Grid<T>>>,
}

impl<T: Scalar> StitchUnit<T> {
    pub fn new(weights: StitchWeights<T>) -> Self {
        Self { weights, cache: None }
    }

    pub fn forward(&mut self, xs: &[Grid<T>]) -> Result<Vec<Grid<T>>> {
        let out = stitch_forward(xs, &self.weights)?;
        self.cache = Some(xs.to_vec());
        Ok(out)
    }

    pub fn backward(&self, upstream: &[Grid<T>]) -> Result<(Vec<Grid<T>>, StitchWeights<T>)> {
        let xs = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        stitch_backward(xs, &self.weights, upstream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// One shared branch feeding every task output (hard parameter sharing).
    HardShared,
    /// Per-task branches mixed by a cross-stitch unit.
    CrossStitch(StitchMode),
}

/// Weights of one pyramid level's head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub kind: HeadKind,
    /// One branch for [`HeadKind::HardShared`], one per task otherwise.
    pub branches: Vec<Conv1x1<T>>,
    pub stitch: Option<StitchWeights<T>>,
    pub outputs: Vec<Conv1x1<T>>,
}

impl<T: Scalar> HeadParams<T> {
    /// Zero weights, identity stitch.
    pub fn zeros(kind: HeadKind, in_channels: usize, channels: usize) -> Self {
        let (branches, stitch) = match kind {
            HeadKind::HardShared => (vec![Conv1x1::zeros(in_channels, channels)], None),
            HeadKind::CrossStitch(mode) => (
                (0..NUM_TASKS).map(|_| Conv1x1::zeros(in_channels, channels)).collect(),
                Some(StitchWeights::identity(mode, channels)),
            ),
        };
        let outputs = TASK_WIDTHS
            .iter()
            .map(|&width| Conv1x1::zeros(channels, width * ANCHORS_PER_CELL))
            .collect();
        Self {
            kind,
            branches,
            stitch,
            outputs,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].in_channels
    }

    /// Every weight tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.branches {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        if let Some(s) = &self.stitch {
            out.push(&s.w);
        }
        for o in &self.outputs {
            out.push(&o.weight);
            out.push(&o.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in self.branches.iter_mut() {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        if let Some(s) = self.stitch.as_mut() {
            out.push(&mut s.w);
        }
        for o in self.outputs.iter_mut() {
            out.push(&mut o.weight);
            out.push(&mut o.bias);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..self.branches.len() {
            out.push(format!("branch{b}.weight"));
            out.push(format!("branch{b}.bias"));
        }
        if self.stitch.is_some() {
            out.push("stitch".to_string());
        }
        for o in 0..self.outputs.len() {
            out.push(format!("output{o}.weight"));
            out.push(format!("output{o}.bias"));
        }
        out
    }
}

/// Activations kept by [`head_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    trunk: Grid<T>,
    branch_out: Vec<Grid<T>>,
    mixed: Vec<Grid<T>>,
}

/// Runs one level's head on trunk features. Returns the four task output
/// grids (cls, box, landmarks, pose) and the activations for backward.
pub fn head_forward<T: Scalar>(params: &HeadParams<T>, trunk: &Grid<T>) -> Result<(Vec<Grid<T>>, HeadCache<T>)> {
    let branch_out = params
        .branches
        .iter()
        .map(|b| b.forward(trunk))
        .collect::<Result<Vec<_>>>()?;
    let mixed = match (&params.kind, &params.stitch) {
        (HeadKind::HardShared, _) => branch_out.clone(),
        (HeadKind::CrossStitch(_), Some(w)) => stitch_forward(&branch_out, w)?,
        (HeadKind::CrossStitch(_), None) => {
            return Err(Error::ShapeMismatch("cross-stitch head without stitch weights".into()))
        }
    };
    let outputs = params
        .outputs
        .iter()
        .enumerate()
        .map(|(t, o)| o.forward(&mixed[t.min(mixed.len() - 1)]))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outputs,
        HeadCache {
            trunk: trunk.clone(),
            branch_out,
            mixed,
        },
    ))
}

/// Backward of [`head_forward`]: trunk gradient plus parameter gradients.
pub fn head_backward<T: Scalar>(
    params: &HeadParams<T>,
    cache: &HeadCache<T>,
    upstream: &[Grid<T>],
) -> Result<(Grid<T>, HeadParams<T>)> {
    if upstream.len() != NUM_TASKS {
        return Err(Error::ShapeMismatch(format!("expected {NUM_TASKS} upstream grids")));
    }
    let mut grads = params.zeros_like();
    let (c, h, w) = cache.mixed[0].shape();
    let mut d_mixed: Vec<Grid<T>> = (0..cache.mixed.len()).map(|_| Grid::zeros(c, h, w)).collect();
    for (t, out) in params.outputs.iter().enumerate() {
        let src = t.min(cache.mixed.len() - 1);
        let g = out.backward(&cache.mixed[src], &upstream[t], &mut grads.outputs[t])?;
        d_mixed[src].axpy(T::one(), &g)?;
    }
    let d_branch = match (&params.kind, &params.stitch) {
        (HeadKind::CrossStitch(_), Some(sw)) => {
            let (dx, dw) = stitch_backward(&cache.branch_out, sw, &d_mixed)?;
            grads.stitch = Some(dw);
            dx
        }
        _ => d_mixed,
    };
    let mut d_trunk = Grid::zeros(cache.trunk.channels(), cache.trunk.height(), cache.trunk.width());
    for (b, branch) in params.branches.iter().enumerate() {
        let g = branch.backward(&cache.trunk, &d_branch[b], &mut grads.branches[b])?;
        d_trunk.axpy(T::one(), &g)?;
    }
    Ok((d_trunk, grads))
}

/// Head weights with the activations of the most recent forward pass.
#[derive(Debug, Clone)]
pub struct TaskHeadState<T> {
    pub params: HeadParams<T>,
    cache: Option<HeadCache<T>>,
}

impl<T: Scalar> TaskHeadState<T> {
    pub fn new(params: HeadParams<T>) -> Self {
        Self { params, cache: None }
    }

    pub fn forward(&mut self, trunk: &Grid<T>) -> Result<Vec<Grid<T>>> {
        let (out, cache) = head_forward(&self.params, trunk)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, upstream: &[Grid<T>]) -> Result<(Grid<T>, HeadParams<T>)> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        head_backward(&self.params, cache, upstream)
    }
}

/// Reads per-anchor predictions out of per-level task grids, in
/// [`AnchorSet`] order. Task grid channel `k·width + e` holds element `e`
/// of anchor slot `k`.
pub fn gather_predictions<T: Scalar>(anchors: &AnchorSet<T>, levels: &[Vec<Grid<T>>]) -> Result<Predictions<T>> {
    if levels.len() != anchors.levels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} level outputs for {} pyramid levels",
            levels.len(),
            anchors.levels.len()
        )));
    }
    let mut preds = Predictions::zeros(anchors.len());
    for (layout, outputs) in anchors.levels.iter().zip(levels) {
        for (t, grid) in outputs.iter().enumerate() {
            let width = TASK_WIDTHS[t];
            if grid.shape() != (width * ANCHORS_PER_CELL, layout.side, layout.side) {
                return Err(Error::ShapeMismatch(format!(
                    "task {t} output {:?} does not fit a {side}x{side} level",
                    grid.shape(),
                    side = layout.side
                )));
            }
            let dst = task_slice_mut(&mut preds, t);
            let plane = grid.plane();
            for cell in 0..plane {
                for k in 0..ANCHORS_PER_CELL {
                    let a = layout.offset + cell * ANCHORS_PER_CELL + k;
                    for e in 0..width {
                        dst[a * width + e] = grid.data()[(k * width + e) * plane + cell];
                    }
                }
            }
        }
    }
    Ok(preds)
}

/// Inverse of [`gather_predictions`] for gradients.
pub fn scatter_gradients<T: Scalar>(anchors: &AnchorSet<T>, grads: &Predictions<T>) -> Vec<Vec<Grid<T>>> {
    anchors
        .levels
        .iter()
        .map(|layout| {
            (0..NUM_TASKS)
                .map(|t| {
                    let width = TASK_WIDTHS[t];
                    let mut grid = Grid::zeros(width * ANCHORS_PER_CELL, layout.side, layout.side);
                    let src = task_slice(grads, t);
                    let plane = grid.plane();
                    let data = grid.data_mut();
                    for cell in 0..plane {
                        for k in 0..ANCHORS_PER_CELL {
                            let a = layout.offset + cell * ANCHORS_PER_CELL + k;
                            for e in 0..width {
                                data[(k * width + e) * plane + cell] = src[a * width + e];
                            }
                        }
                    }
                    grid
                })
                .collect()
        })
        .collect()
}

fn task_slice<T>(p: &Predictions<T>, t: usize) -> &[T] {
    match t {
        0 => &p.cls,
        1 => &p.boxes,
        2 => &p.landmarks,
        _ => &p.pose,
    }
}

fn task_slice_mut<T>(p: &mut Predictions<T>, t: usize) -> &mut [T] {
    match t {
        0 => &mut p.cls,
        1 => &mut p.boxes,
        2 => &mut p.landmarks,
        _ => &mut p.pose,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_anchors, PyramidSpec};
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid<f64> {
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn task_grids(rng: &mut ChaCha8Rng, c: usize) -> Vec<Grid<f64>> {
        (0..NUM_TASKS).map(|_| random_grid(rng, c, 2, 3)).collect()
    }

    #[test]
    fn identity_stitch_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = task_grids(&mut rng, 3);
        for mode in [StitchMode::Full, StitchMode::Gated] {
            let out = stitch_forward(&xs, &StitchWeights::identity(mode, 3)).unwrap();
            assert_eq!(out, xs);
            let (dx, _) = stitch_backward(&xs, &StitchWeights::identity(mode, 3), &xs).unwrap();
            assert_eq!(dx, xs);
        }
    }

    #[test]
    fn uniform_full_mixing_gives_task_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = task_grids(&mut rng, 2);
        let w = StitchWeights {
            mode: StitchMode::Full,
            channels: 2,
            w: vec![0.25; NUM_TASKS * NUM_TASKS * 2],
        };
        let out = stitch_forward(&xs, &w).unwrap();
        for (p, &v) in out[0].data().iter().enumerate() {
            let mean = xs.iter().map(|x| x.data()[p]).sum::<f64>() / 4.0;
            assert!((v - mean).abs() < 1e-15);
            for o in &out[1..] {
                assert!((o.data()[p] - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_weight_gradient_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Grid<f64>> = (0..NUM_TASKS).map(|_| random_grid(&mut rng, 1, 2, 2)).collect();
        let up: Vec<Grid<f64>> = (0..NUM_TASKS).map(|_| random_grid(&mut rng, 1, 2, 2)).collect();
        let w = StitchWeights::identity(StitchMode::Full, 1);
        let (_, dw) = stitch_backward(&xs, &w, &up).unwrap();
        let expected: f64 = xs[1].data().iter().zip(up[0].data()).map(|(x, g)| x * g).sum();
        assert!((dw.full(0, 1, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_and_missing_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut xs = task_grids(&mut rng, 2);
        xs[3] = random_grid(&mut rng, 2, 3, 3);
        assert!(stitch_forward(&xs, &StitchWeights::identity(StitchMode::Gated, 2)).is_err());
        let unit = StitchUnit::new(StitchWeights::<f64>::identity(StitchMode::Full, 2));
        assert_eq!(unit.backward(&xs).unwrap_err(), Error::NoForwardCache);
        let head = TaskHeadState::new(HeadParams::<f64>::zeros(HeadKind::HardShared, 2, 2));
        assert_eq!(head.backward(&xs).unwrap_err(), Error::NoForwardCache);
    }

    #[test]
    fn stitch_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in [StitchMode::Full, StitchMode::Gated] {
            let mut w = StitchWeights::identity(mode, 3);
            w.w.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let x = task_grids(&mut rng, 3);
            let y = task_grids(&mut rng, 3);
            let (a, b) = (0.7, -1.3);
            let combo: Vec<Grid<f64>> = x
                .iter()
                .zip(&y)
                .map(|(xi, yi)| {
                    let mut g = xi.scaled(a);
                    g.axpy(b, yi).unwrap();
                    g
                })
                .collect();
            let lhs = stitch_forward(&combo, &w).unwrap();
            let fx = stitch_forward(&x, &w).unwrap();
            let fy = stitch_forward(&y, &w).unwrap();
            for t in 0..NUM_TASKS {
                let mut rhs = fx[t].scaled(a);
                rhs.axpy(b, &fy[t]).unwrap();
                assert!(lhs[t].max_abs_diff(&rhs) < 1e-12);
            }
        }
    }

    fn check_stitch_gradients(mode: StitchMode, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2;
        let mut w = StitchWeights::identity(mode, c);
        w.w.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let xs = task_grids(&mut rng, c);
        let probe = task_grids(&mut rng, c);
        let loss = |xs: &[Grid<f64>], w: &StitchWeights<f64>| -> f64 {
            let out = stitch_forward(xs, w).unwrap();
            out.iter()
                .zip(&probe)
                .map(|(o, p)| o.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (dx, dw) = stitch_backward(&xs, &w, &probe).unwrap();
        let x_len = xs[0].data().len();
        let mut theta: Vec<f64> = xs.iter().flat_map(|x| x.data().to_vec()).collect();
        theta.extend_from_slice(&w.w);
        let mut analytic: Vec<f64> = dx.iter().flat_map(|x| x.data().to_vec()).collect();
        analytic.extend_from_slice(&dw.w);
        let r = finite_diff_check(
            |t: &[f64]| {
                let xs: Vec<Grid<f64>> = (0..NUM_TASKS)
                    .map(|i| Grid::from_vec(c, 2, 3, t[i * x_len..(i + 1) * x_len].to_vec()).unwrap())
                    .collect();
                let mut w2 = w.clone();
                w2.w.copy_from_slice(&t[NUM_TASKS * x_len..]);
                loss(&xs, &w2)
            },
            &theta,
            &analytic,
        )
        .unwrap();
        r.max_rel_error
    }

    #[test]
    fn stitch_backward_passes_oracle() {
        for seed in 0..5 {
            assert!(check_stitch_gradients(StitchMode::Full, seed) < 1e-5);
            assert!(check_stitch_gradients(StitchMode::Gated, seed) < 1e-5);
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, kind: HeadKind, cin: usize, c: usize) -> HeadParams<f64> {
        let mut p = HeadParams::zeros(kind, cin, c);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        p
    }

    #[test]
    fn zero_trunk_zero_bias_gives_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = random_params(&mut rng, HeadKind::CrossStitch(StitchMode::Gated), 3, 4);
        for b in p.branches.iter_mut().chain(p.outputs.iter_mut()) {
            b.bias.fill(0.0);
        }
        let (out, _) = head_forward(&p, &Grid::zeros(3, 2, 2)).unwrap();
        assert!(out.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
        assert!(head_forward(&p, &Grid::zeros(5, 2, 2)).is_err());
    }

    #[test]
    fn tied_identity_head_equals_hard_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hard = random_params(&mut rng, HeadKind::HardShared, 3, 4);
        let mut soft = HeadParams::zeros(HeadKind::CrossStitch(StitchMode::Full), 3, 4);
        for b in soft.branches.iter_mut() {
            *b = hard.branches[0].clone();
        }
        soft.outputs = hard.outputs.clone();
        let trunk = random_grid(&mut rng, 3, 4, 4);
        let (a, _) = head_forward(&hard, &trunk).unwrap();
        let (b, _) = head_forward(&soft, &trunk).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let spec = PyramidSpec::standard(64).unwrap();
        let anchors = generate_anchors::<f64>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let levels: Vec<Vec<Grid<f64>>> = anchors
            .levels
            .iter()
            .map(|l| {
                TASK_WIDTHS
                    .iter()
                    .map(|w| random_grid(&mut rng, w * ANCHORS_PER_CELL, l.side, l.side))
                    .collect()
            })
            .collect();
        let preds = gather_predictions(&anchors, &levels).unwrap();
        assert_eq!(preds.len(), anchors.len());
        // Anchor slot 1 of cell (2, 3) on level 1.
        let a = anchors.index(1, 2, 3, 1);
        assert_eq!(preds.box_at(a)[2], levels[1][1].get(4 + 2, 2, 3));
        assert_eq!(scatter_gradients(&anchors, &preds), levels);
    }
}
