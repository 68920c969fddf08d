//! 66-bin head-pose discretization: 3° bins spanning [-99°, 99°).

use crate::error::{Error, Result};
use crate::numerics::softmax_into;
use crate::scalar::Scalar;

pub const NUM_BINS: usize = 66;
pub const BIN_WIDTH: f64 = 3.0;
pub const ANGLE_MIN: f64 = -99.0;
pub const ANGLE_MAX: f64 = 99.0;
/// Largest angle kept when clamping training targets.
pub const CLAMP_MAX: f64 = 98.999;

/// Center of bin `k` in degrees.
#[inline]
pub fn bin_center<T: Scalar>(k: usize) -> T {
    T::lit(ANGLE_MIN + BIN_WIDTH * k as f64 + 0.5 * BIN_WIDTH)
}

pub fn encode_bin<T: Scalar>(angle: T) -> Result<usize> {
    let a = angle.as_f64();
    if !(ANGLE_MIN..ANGLE_MAX).contains(&a) {
        return Err(Error::AngleOutOfRange(a));
    }
    let k = ((a - ANGLE_MIN) / BIN_WIDTH).floor() as usize;
    Ok(k.min(NUM_BINS - 1))
}

/// Clamps a training angle into the encodable range, warning when it moves.
pub fn clamp_angle<T: Scalar>(angle: T) -> T {
    let lo = T::lit(ANGLE_MIN);
    let hi = T::lit(CLAMP_MAX);
    if angle < lo || angle > hi {
        log::warn!("pose angle {angle} clamped into [{ANGLE_MIN}, {CLAMP_MAX}]");
        angle.max(lo).min(hi)
    } else {
        angle
    }
}

/// Probability-weighted mean of the bin centers.
pub fn decode_expected<T: Scalar>(logits: &[T]) -> T {
    let mut p = [T::zero(); NUM_BINS];
    decode_expected_with_probs(logits, &mut p)
}

/// Like [`decode_expected`], leaving the softmax in `probs`.
pub(crate) fn decode_expected_with_probs<T: Scalar>(logits: &[T], probs: &mut [T; NUM_BINS]) -> T {
    debug_assert_eq!(logits.len(), NUM_BINS);
    softmax_into(logits, probs);
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p * bin_center::<T>(k))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; NUM_BINS];
        v[k] = 1000.0;
        v
    }

    #[test]
    fn bin_edges() {
        assert_eq!(encode_bin(0.0).unwrap(), 33);
        assert_eq!(encode_bin(-99.0).unwrap(), 0);
        assert_eq!(encode_bin(98.9).unwrap(), 65);
        assert!(encode_bin(99.0).is_err());
        assert!(encode_bin(-99.5).is_err());
        assert!(encode_bin(f64::NAN).is_err());
    }

    #[test]
    fn expected_value_examples() {
        assert!(decode_expected(&[0.0f64; NUM_BINS]).abs() < 1e-12);
        assert_eq!(decode_expected(&one_hot(0)), -97.5);
        assert_eq!(decode_expected(&one_hot(33)), 1.5);
    }

    #[test]
    fn clamping() {
        assert_eq!(clamp_angle(120.0), CLAMP_MAX);
        assert_eq!(clamp_angle(-150.0), ANGLE_MIN);
        assert_eq!(clamp_angle(12.5), 12.5);
        assert!(encode_bin(clamp_angle(500.0)).is_ok());
    }

    #[test]
    fn one_degree_sweep_round_trips_within_half_bin() {
        for d in -99..=98 {
            let theta = d as f64;
            let k = encode_bin(theta).unwrap();
            assert!((decode_expected(&one_hot(k)) - theta).abs() <= 1.5);
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(theta in -99.0f64..98.999) {
            let k = encode_bin(theta).unwrap();
            prop_assert!((decode_expected(&one_hot(k)) - theta).abs() <= 1.5);
        }

        #[test]
        fn shift_invariant(logits in prop::collection::vec(-10.0f64..10.0, NUM_BINS), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            prop_assert!((decode_expected(&logits) - decode_expected(&shifted)).abs() < 1e-9);
        }
    }
}
