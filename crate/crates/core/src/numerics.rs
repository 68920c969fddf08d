//! Dense grids, the small set of differentiable primitives used by the
//! losses, and the central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rank-3 array laid out channel-major: `data[(c * height + y) * width + x]`.
///
/// With this layout a 1×1 convolution is a matrix multiply over the
/// channel axis for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels per channel.
    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "axpy between {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("representable"))
                .collect(),
        }
    }
}

/// Smooth L1 (Huber with unit threshold). Rejects non-finite input.
pub fn smooth_l1<T: Scalar>(x: T) -> Result<T> {
    if !x.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    Ok(smooth_l1_unchecked(x))
}

#[inline]
pub(crate) fn smooth_l1_unchecked<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

/// Derivative of [`smooth_l1`]: `x` inside the unit band, `sign(x)` outside.
#[inline]
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// Numerically stable softmax. Shifting every logit by a constant leaves
/// the output unchanged.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Softmax into a caller-provided buffer; returns `ln Σ exp(z - max)`.
#[inline]
pub(crate) fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    total.ln()
}

/// `ln softmax(logits)[k]`, computed without forming the probabilities.
pub fn log_softmax_at<T: Scalar>(logits: &[T], k: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    logits[k] - max - total.ln()
}

/// Compensated (Neumaier) running sum. Keeps the rounding of long loss
/// reductions near one ulp of the result instead of growing with the count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Scalar> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            carry: T::zero(),
        }
    }

    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.carry
    }
}

impl<T: Scalar> Default for CompensatedSum<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub worst_index: usize,
    pub analytic: T,
    pub numeric: T,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn passes(&self, tolerance: T) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative-error gate every analytic backward pass must clear.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

/// Compares `analytic` against central differences of `f` around `theta`.
///
/// The step for coordinate `i` is `1e-5 * max(1, |theta_i|)`; the error is
/// `|a - n| / max(1e-8, |a| + |n|)`. A non-finite evaluation of `f` is
/// reported with the coordinate that produced it.
pub fn finite_diff_check<T, F>(mut f: F, theta: &[T], analytic: &[T]) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if theta.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} analytic gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    if theta.is_empty() {
        return Err(Error::EmptyInput("gradient check parameters"));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst_index: 0,
        analytic: analytic[0],
        numeric: T::zero(),
    };
    let mut first = true;
    for i in 0..theta.len() {
        let h = T::lit(1e-5) * T::one().max(theta[i].abs());
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let numeric = (plus - minus) / (h + h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / T::lit(1e-8).max(a.abs() + numeric.abs());
        if first || rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
            first = false;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(0.5).unwrap(), 0.125);
        assert_eq!(smooth_l1(2.0).unwrap(), 1.5);
        assert_eq!(smooth_l1(-2.0f32).unwrap(), 1.5);
        assert!(smooth_l1(f64::NAN).is_err());
        assert!(smooth_l1(f64::INFINITY).is_err());
    }

    #[test]
    fn smooth_l1_is_c1_at_the_knee() {
        for s in [1.0f64, -1.0] {
            let below = s * (1.0 - 1e-12);
            assert!((smooth_l1_unchecked(below) - smooth_l1_unchecked(s)).abs() < 1e-11);
            assert!((smooth_l1_grad(below) - smooth_l1_grad(s)).abs() < 1e-11);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax::<f64>(&[]), Err(Error::EmptyInput("softmax logits")));
    }

    #[test]
    fn grad_check_examples() {
        let r = finite_diff_check(|t: &[f64]| t[0] * t[0], &[3.0], &[6.0]).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        let r = finite_diff_check(|t: &[f64]| smooth_l1(t[0]).unwrap(), &[0.5], &[0.5]).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let wrong = finite_diff_check(|t: &[f64]| t[0] * t[1], &[2.0, 3.0], &[3.0, 1.0]).unwrap();
        assert_eq!(wrong.worst_index, 1);
        assert!(wrong.max_rel_error > 0.1);
    }

    #[test]
    fn grad_check_reports_offending_index() {
        let err = finite_diff_check(
            |t: &[f64]| if t[1] > 1.0 { f64::NAN } else { t[0] },
            &[0.0, 1.0],
            &[1.0, 0.0],
        )
        .unwrap_err();
        assert_eq!(err, Error::NonFinite { index: 1 });
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
        assert_eq!(
            Grid::from_vec(1, 1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
        let g = Grid::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.get(1, 0, 0), 3.0);
        assert_eq!(g.channel(1), &[3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn softmax_is_a_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
