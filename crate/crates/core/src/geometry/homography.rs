use nalgebra::{Matrix3, SMatrix, SVector};

use super::Point;
use crate::error::{Error, Result};

/// Projective map of the plane, applied to points in continuous pixel
/// coordinates (pixel `i` spans `[i, i + 1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    /// Map sending each `src[i]` onto `dst[i]`.
    pub fn from_correspondences(src: &[Point; 4], dst: &[Point; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (s, d)) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a[(r, 0)] = s.x;
            a[(r, 1)] = s.y;
            a[(r, 2)] = 1.0;
            a[(r, 6)] = -s.x * d.x;
            a[(r, 7)] = -s.y * d.x;
            b[r] = d.x;
            a[(r + 1, 3)] = s.x;
            a[(r + 1, 4)] = s.y;
            a[(r + 1, 5)] = 1.0;
            a[(r + 1, 6)] = -s.x * d.y;
            a[(r + 1, 7)] = -s.y * d.y;
            b[r + 1] = d.y;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Geometry("degenerate point correspondence".into()))?;
        Ok(Homography(Matrix3::new(
            h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
        )))
    }

    /// Rotation by `degrees` (counter-clockwise in image coordinates with y down
    /// appears clockwise on screen) about `center`.
    pub fn rotation(center: Point, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let t = Matrix3::new(1.0, 0.0, center.x, 0.0, 1.0, center.y, 0.0, 0.0, 1.0);
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let t_inv = Matrix3::new(1.0, 0.0, -center.x, 0.0, 1.0, -center.y, 0.0, 0.0, 1.0);
        Homography(t * r * t_inv)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Homography(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.0;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        Point::new(
            (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
            (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
        )
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &Homography) -> Homography {
        Homography(self.0 * first.0)
    }

    pub fn inverse(&self) -> Result<Homography> {
        self.0
            .try_inverse()
            .map(Homography)
            .ok_or_else(|| Error::Geometry("singular homography".into()))
    }
}
