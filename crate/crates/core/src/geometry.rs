use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Faces with both sides at or below this many pixels count as small.
pub const SMALL_FACE_SIDE: f64 = 25.0;

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::DegenerateBox {
                x1: x1.as_f64(),
                y1: y1.as_f64(),
                x2: x2.as_f64(),
                y2: y2.as_f64(),
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let half = T::lit(0.5);
        Self::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (half * (self.x1 + self.x2), half * (self.y1 + self.y2))
    }

    /// Maps the box through `p -> p * scale + offset`.
    pub fn affine(&self, scale: T, dx: T, dy: T) -> Self {
        Self {
            x1: self.x1 * scale + dx,
            y1: self.y1 * scale + dy,
            x2: self.x2 * scale + dx,
            y2: self.y2 * scale + dy,
        }
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::lit(self.x1.as_f64()),
            y1: U::lit(self.y1.as_f64()),
            x2: U::lit(self.x2.as_f64()),
            y2: U::lit(self.y2.as_f64()),
        }
    }
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    if inter <= T::zero() {
        return T::zero();
    }
    inter / (a.area() + b.area() - inter)
}

/// Inclusive on both sides: a 25×25 face is small.
pub fn is_small_face<T: Scalar>(b: &BBox<T>) -> bool {
    is_small_face_with(b, T::lit(SMALL_FACE_SIDE))
}

pub fn is_small_face_with<T: Scalar>(b: &BBox<T>, side: T) -> bool {
    b.width() <= side && b.height() <= side
}

/// `sqrt(width * height)`, the normalizer for landmark error.
pub fn face_scale<T: Scalar>(b: &BBox<T>) -> T {
    b.area().sqrt()
}

/// Five facial points: left eye, right eye, nose, left and right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet<T> {
    pub points: [[T; 2]; 5],
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: [[T; 2]; 5]) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(Self { points })
    }

    pub fn affine(&self, scale: T, dx: T, dy: T) -> Self {
        let mut points = self.points;
        for p in points.iter_mut() {
            p[0] = p[0] * scale + dx;
            p[1] = p[1] * scale + dy;
        }
        Self { points }
    }

    /// Flattened as `x1, y1, ..., x5, y5`.
    pub fn flat(&self) -> [T; 10] {
        let mut out = [T::zero(); 10];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p[0];
            out[2 * i + 1] = p[1];
        }
        out
    }

    pub fn from_flat(v: &[T; 10]) -> Self {
        let mut points = [[T::zero(); 2]; 5];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [v[2 * i], v[2 * i + 1]];
        }
        Self { points }
    }

    pub fn cast<U: Scalar>(&self) -> LandmarkSet<U> {
        let mut points = [[U::zero(); 2]; 5];
        for (dst, src) in points.iter_mut().zip(&self.points) {
            *dst = [U::lit(src[0].as_f64()), U::lit(src[1].as_f64())];
        }
        LandmarkSet { points }
    }
}

/// One annotated face: box, landmarks, head pose (yaw, pitch, roll in
/// degrees) and per-annotation validity flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Face<T> {
    pub bbox: BBox<T>,
    pub landmarks: LandmarkSet<T>,
    pub pose: [T; 3],
    pub landmark_valid: bool,
    pub pose_valid: bool,
}

impl<T: Scalar> Face<T> {
    pub fn affine(&self, scale: T, dx: T, dy: T) -> Self {
        Self {
            bbox: self.bbox.affine(scale, dx, dy),
            landmarks: self.landmarks.affine(scale, dx, dy),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Face<U> {
        Face {
            bbox: self.bbox.cast(),
            landmarks: self.landmarks.cast(),
            pose: self.pose.map(|a| U::lit(a.as_f64())),
            landmark_valid: self.landmark_valid,
            pose_valid: self.pose_valid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert!((iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn small_face_threshold_is_inclusive() {
        assert!(is_small_face(&b(0.0, 0.0, 24.0, 24.0)));
        assert!(is_small_face(&b(0.0, 0.0, 25.0, 25.0)));
        assert!(!is_small_face(&b(0.0, 0.0, 26.0, 20.0)));
        assert!(!is_small_face(&b(0.0, 0.0, 20.0, 25.5)));
    }

    #[test]
    fn face_scale_examples() {
        assert_eq!(face_scale(&b(0.0, 0.0, 10.0, 10.0)), 10.0);
        assert_eq!(face_scale(&b(0.0, 0.0, 4.0, 9.0)), 6.0);
        assert_eq!(face_scale(&b(3.0, 3.0, 28.0, 28.0)), 25.0);
    }

    #[test]
    fn landmark_flat_layout() {
        let lm = LandmarkSet::new([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.0]]).unwrap();
        assert_eq!(lm.flat(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(LandmarkSet::from_flat(&lm.flat()), lm);
        assert!(LandmarkSet::new([[0.0, f64::INFINITY]; 5]).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_monotone(
            x in -50.0f64..50.0, y in -50.0f64..50.0, w in 1.0f64..40.0, h in 1.0f64..40.0,
            x2 in -50.0f64..50.0, y2 in -50.0f64..50.0, w2 in 1.0f64..40.0, h2 in 1.0f64..40.0,
            step in 0.1f64..5.0,
        ) {
            let a = b(x, y, x + w, y + h);
            let c = b(x2, y2, x2 + w2, y2 + h2);
            prop_assert!((iou(&a, &c) - iou(&c, &a)).abs() < 1e-15);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            // Slide `c` away from `a` along x; overlap never grows.
            let mut prev = iou(&a, &a);
            for k in 0..20 {
                let moved = a.affine(1.0, step * k as f64, 0.0);
                let cur = iou(&a, &moved);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
            }
        }
    }
}
