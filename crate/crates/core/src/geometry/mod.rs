//! Oriented part crops computed from keypoints.
//!
//! The trunk gets a rectangle aligned with the body axis; limbs and the two
//! tail segments get thin rectangles spanning a keypoint pair.

mod homography;

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

pub use homography::Homography;

use crate::data::{KeypointSet, NUM_KEYPOINTS, TAIL_DISTAL, TAIL_PROXIMAL};
use crate::error::{Error, Result};
use crate::raster::{Border, Raster};

/// Keypoint indices of the 15-joint body schema used for the defaults.
pub mod joints {
    pub const LEFT_EAR: usize = 0;
    pub const RIGHT_EAR: usize = 1;
    pub const NOSE: usize = 2;
    pub const RIGHT_SHOULDER: usize = 3;
    pub const RIGHT_FRONT_PAW: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const LEFT_FRONT_PAW: usize = 6;
    pub const RIGHT_HIP: usize = 7;
    pub const RIGHT_KNEE: usize = 8;
    pub const RIGHT_BACK_PAW: usize = 9;
    pub const LEFT_HIP: usize = 10;
    pub const LEFT_KNEE: usize = 11;
    pub const LEFT_BACK_PAW: usize = 12;
    pub const TAIL_ROOT: usize = 13;
    pub const CENTER: usize = 14;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Counter-clockwise quarter turn (in a y-up frame).
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }

    pub fn rotated(self, radians: f64) -> Point {
        let (s, c) = radians.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

/// Four corners in consistent winding order. Corner 0 maps to the top-left
/// of an extracted part image, corner 1 to the top-right, corner 2 to the
/// bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    corners: [Point; 4],
}

impl Quad {
    pub fn new(corners: [Point; 4]) -> Result<Self> {
        let q = Quad { corners };
        if !(q.area() > 1e-9) {
            return Err(Error::Geometry("quad has zero area".into()));
        }
        let c = &corners;
        if segments_cross(c[0], c[1], c[2], c[3]) || segments_cross(c[1], c[2], c[3], c[0]) {
            return Err(Error::Geometry("quad is self-intersecting".into()));
        }
        Ok(q)
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    fn signed_area(&self) -> f64 {
        let c = &self.corners;
        (0..4)
            .map(|i| {
                let (a, b) = (c[i], c[(i + 1) % 4]);
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Inside or on the boundary (within `tol` pixels).
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let sign = self.signed_area().signum();
        (0..4).all(|i| {
            let (a, b) = (self.corners[i], self.corners[(i + 1) % 4]);
            let edge = b - a;
            let cross = edge.x * (p.y - a.y) - edge.y * (p.x - a.x);
            sign * cross / edge.norm() >= -tol
        })
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Quad {
        Quad {
            corners: self.corners.map(f),
        }
    }

    /// True when the quad shares positive area with `[0, w] x [0, h]`.
    pub fn overlaps_rect(&self, w: f64, h: f64) -> bool {
        let rect = [
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ];
        let mut axes = vec![Point::new(1.0, 0.0), Point::new(0.0, 1.0)];
        for i in 0..4 {
            axes.push((self.corners[(i + 1) % 4] - self.corners[i]).perp());
        }
        axes.iter().all(|axis| {
            let (a0, a1) = project(&self.corners, *axis);
            let (b0, b1) = project(&rect, *axis);
            a1 > b0 && b1 > a0
        })
    }
}

fn project(points: &[Point; 4], axis: Point) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let orient = |p: Point, q: Point, r: Point| (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Trunk,
    LimbFl,
    LimbFr,
    LimbBl,
    LimbBr,
    TailProximal,
    TailDistal,
}

impl PartKind {
    pub const ALL: [PartKind; 7] = [
        PartKind::Trunk,
        PartKind::LimbFl,
        PartKind::LimbFr,
        PartKind::LimbBl,
        PartKind::LimbBr,
        PartKind::TailProximal,
        PartKind::TailDistal,
    ];

    /// Parts feeding the limb stream, in embedding-block order.
    pub const LIMB_STREAM: [PartKind; 6] = [
        PartKind::LimbFl,
        PartKind::LimbFr,
        PartKind::LimbBl,
        PartKind::LimbBr,
        PartKind::TailProximal,
        PartKind::TailDistal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_tail(self) -> bool {
        matches!(self, PartKind::TailProximal | PartKind::TailDistal)
    }

    pub fn name(self) -> &'static str {
        match self {
            PartKind::Trunk => "trunk",
            PartKind::LimbFl => "limb_fl",
            PartKind::LimbFr => "limb_fr",
            PartKind::LimbBl => "limb_bl",
            PartKind::LimbBr => "limb_br",
            PartKind::TailProximal => "tail_proximal",
            PartKind::TailDistal => "tail_distal",
        }
    }
}

/// A part crop; invalid crops carry no quad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartCrop {
    pub part: PartKind,
    pub quad: Option<Quad>,
}

impl PartCrop {
    pub fn invalid(part: PartKind) -> Self {
        PartCrop { part, quad: None }
    }

    pub fn is_valid(&self) -> bool {
        self.quad.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartConfig {
    /// Limb rectangle width as a fraction of its length.
    pub limb_ratio: f64,
    /// Trunk padding as a fraction of the body-axis length.
    pub trunk_padding: f64,
    /// Keypoint pairs for front-left, front-right, back-left, back-right.
    pub limb_pairs: [(usize, usize); 4],
    pub trunk_keypoints: Vec<usize>,
    pub front_anchors: Vec<usize>,
    pub rear_anchors: Vec<usize>,
    pub tail_root: usize,
}

impl Default for PartConfig {
    fn default() -> Self {
        use joints::*;
        PartConfig {
            limb_ratio: 1.0 / 3.0,
            trunk_padding: 0.1,
            limb_pairs: [
                (LEFT_SHOULDER, LEFT_FRONT_PAW),
                (RIGHT_SHOULDER, RIGHT_FRONT_PAW),
                (LEFT_HIP, LEFT_BACK_PAW),
                (RIGHT_HIP, RIGHT_BACK_PAW),
            ],
            trunk_keypoints: vec![
                RIGHT_SHOULDER,
                LEFT_SHOULDER,
                RIGHT_HIP,
                LEFT_HIP,
                TAIL_ROOT,
                CENTER,
            ],
            front_anchors: vec![RIGHT_SHOULDER, LEFT_SHOULDER],
            rear_anchors: vec![RIGHT_HIP, LEFT_HIP, TAIL_ROOT],
            tail_root: TAIL_ROOT,
        }
    }
}

impl PartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.limb_ratio > 0.0 && self.limb_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "limb_ratio {} not in (0, 1]",
                self.limb_ratio
            )));
        }
        if !(self.trunk_padding >= 0.0) {
            return Err(Error::Config("trunk_padding must be non-negative".into()));
        }
        let all = self
            .limb_pairs
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .chain(self.trunk_keypoints.iter().copied())
            .chain(self.front_anchors.iter().copied())
            .chain(self.rear_anchors.iter().copied())
            .chain([self.tail_root]);
        for i in all {
            if i >= NUM_KEYPOINTS {
                return Err(Error::Config(format!("keypoint index {i} out of range")));
            }
        }
        Ok(())
    }

    pub fn pair_for(&self, part: PartKind) -> Option<(usize, usize)> {
        match part {
            PartKind::Trunk => None,
            PartKind::LimbFl => Some(self.limb_pairs[0]),
            PartKind::LimbFr => Some(self.limb_pairs[1]),
            PartKind::LimbBl => Some(self.limb_pairs[2]),
            PartKind::LimbBr => Some(self.limb_pairs[3]),
            PartKind::TailProximal => Some((self.tail_root, TAIL_PROXIMAL)),
            PartKind::TailDistal => Some((TAIL_PROXIMAL, TAIL_DISTAL)),
        }
    }
}

/// Body orientation: unit vector from the rear anchors to the front anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyAxis {
    pub center: Point,
    pub direction: Point,
    /// Distance between the rear and front centroids.
    pub length: f64,
}

fn centroid(keypoints: &KeypointSet, indices: &[usize]) -> Option<Point> {
    let pts: Vec<Point> = indices
        .iter()
        .map(|&i| keypoints.get(i))
        .filter(|k| k.visible)
        .map(|k| Point::new(k.x, k.y))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    Some(pts.into_iter().fold(Point::default(), |a, p| a + p) * (1.0 / n))
}

pub fn body_axis(keypoints: &KeypointSet, config: &PartConfig) -> Result<BodyAxis> {
    let front = centroid(keypoints, &config.front_anchors)
        .ok_or_else(|| Error::Geometry("no visible front anchor keypoint".into()))?;
    let mut rear_set = config.rear_anchors.clone();
    if !rear_set.contains(&config.tail_root) {
        rear_set.push(config.tail_root);
    }
    let rear = centroid(keypoints, &rear_set)
        .ok_or_else(|| Error::Geometry("no visible rear anchor keypoint".into()))?;
    let d = front - rear;
    let length = d.norm();
    if !(length > 1e-9) {
        return Err(Error::Geometry("front and rear anchors coincide".into()));
    }
    Ok(BodyAxis {
        center: (front + rear) * 0.5,
        direction: d * (1.0 / length),
        length,
    })
}

/// Rectangle aligned with the body axis that encloses the visible trunk
/// keypoints, grown outward by `trunk_padding * axis length` on every side.
pub fn trunk_quad(keypoints: &KeypointSet, config: &PartConfig) -> PartCrop {
    let invalid = PartCrop::invalid(PartKind::Trunk);
    let Ok(axis) = body_axis(keypoints, config) else {
        return invalid;
    };
    let pts: Vec<Point> = config
        .trunk_keypoints
        .iter()
        .map(|&i| keypoints.get(i))
        .filter(|k| k.visible)
        .map(|k| Point::new(k.x, k.y))
        .collect();
    if pts.len() < 3 {
        return invalid;
    }
    let u = axis.direction;
    let v = u.perp();
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        let r = *p - axis.center;
        let (pu, pv) = (r.dot(u), r.dot(v));
        u0 = u0.min(pu);
        u1 = u1.max(pu);
        v0 = v0.min(pv);
        v1 = v1.max(pv);
    }
    let pad = config.trunk_padding * axis.length;
    let (u0, u1, v0, v1) = (u0 - pad, u1 + pad, v0 - pad, v1 + pad);
    let at = |a: f64, b: f64| axis.center + u * a + v * b;
    match Quad::new([at(u0, v0), at(u1, v0), at(u1, v1), at(u0, v1)]) {
        Ok(q) => PartCrop {
            part: PartKind::Trunk,
            quad: Some(q),
        },
        Err(_) => invalid,
    }
}

/// Rectangle centred on segment `ab`, spanning its length, with width
/// `ratio * |b - a|`.
pub fn limb_rect(a: Point, b: Point, ratio: f64) -> Result<Quad> {
    let d = b - a;
    let len = d.norm();
    if !(len > 1e-9) {
        return Err(Error::Geometry("limb endpoints coincide".into()));
    }
    let half = d.perp() * (ratio * 0.5);
    Quad::new([a + half, a - half, b - half, b + half])
}

/// Crops for every part in [`PartKind::ALL`] order.
pub fn part_crops(keypoints: &KeypointSet, config: &PartConfig) -> [PartCrop; 7] {
    PartKind::ALL.map(|part| match config.pair_for(part) {
        None => trunk_quad(keypoints, config),
        Some((ia, ib)) => {
            let (ka, kb) = (keypoints.get(ia), keypoints.get(ib));
            if !(ka.visible && kb.visible) {
                return PartCrop::invalid(part);
            }
            let quad = limb_rect(
                Point::new(ka.x, ka.y),
                Point::new(kb.x, kb.y),
                config.limb_ratio,
            )
            .ok();
            PartCrop { part, quad }
        }
    })
}

/// Result of extracting a part: resampled pixels, or the designated invalid
/// marker. No placeholder pixels are ever produced for invalid parts.
#[derive(Debug, Clone, PartialEq)]
pub enum PartImage {
    Valid(Raster),
    Invalid,
}

impl PartImage {
    pub fn is_valid(&self) -> bool {
        matches!(self, PartImage::Valid(_))
    }

    pub fn raster(&self) -> Option<&Raster> {
        match self {
            PartImage::Valid(r) => Some(r),
            PartImage::Invalid => None,
        }
    }
}

/// Perspective-resamples the crop's quad to `width x height`. Quads partly
/// outside the frame are clamped with replicate padding; quads entirely
/// outside are invalid.
pub fn extract_part(image: &Raster, crop: &PartCrop, width: usize, height: usize) -> Result<PartImage> {
    if width == 0 || height == 0 {
        return Err(Error::Geometry("part image size must be positive".into()));
    }
    let Some(quad) = crop.quad else {
        return Ok(PartImage::Invalid);
    };
    if image.is_empty() || !quad.overlaps_rect(image.width() as f64, image.height() as f64) {
        return Ok(PartImage::Invalid);
    }
    let (w, h) = (width as f64, height as f64);
    let target = [
        Point::new(0.0, 0.0),
        Point::new(w, 0.0),
        Point::new(w, h),
        Point::new(0.0, h),
    ];
    let map = Homography::from_correspondences(&target, quad.corners())?;
    Ok(PartImage::Valid(image.warp(width, height, &map, Border::Replicate)))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::joints::*;
    use super::*;
    use crate::data::Keypoint;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn kps(points: &[(usize, f64, f64)]) -> KeypointSet {
        let mut set = KeypointSet::default();
        for &(i, x, y) in points {
            set.set(i, Keypoint::visible(x, y));
        }
        set
    }

    #[test]
    fn axis_horizontal_and_vertical() {
        let cfg = PartConfig::default();
        let k = kps(&[(LEFT_SHOULDER, 10.0, 0.0), (RIGHT_HIP, 0.0, 0.0)]);
        let a = body_axis(&k, &cfg).unwrap();
        assert!(close(a.direction, Point::new(1.0, 0.0), 1e-12));
        assert!(close(a.center, Point::new(5.0, 0.0), 1e-12));
        let k = kps(&[(LEFT_SHOULDER, 0.0, 10.0), (TAIL_ROOT, 0.0, 0.0)]);
        let a = body_axis(&k, &cfg).unwrap();
        assert!(close(a.direction, Point::new(0.0, 1.0), 1e-12));
    }

    #[test]
    fn axis_requires_anchors() {
        let cfg = PartConfig::default();
        let k = kps(&[(LEFT_SHOULDER, 10.0, 0.0)]);
        assert!(body_axis(&k, &cfg).is_err());
        assert!(!trunk_quad(&k, &cfg).is_valid());
    }

    /// Trunk-only config so the enclosing box is exactly the listed points.
    fn square_config(padding: f64) -> PartConfig {
        PartConfig {
            trunk_padding: padding,
            trunk_keypoints: vec![0, 1, 2, 3],
            front_anchors: vec![4],
            rear_anchors: vec![5],
            tail_root: 5,
            ..PartConfig::default()
        }
    }

    fn aligned_trunk() -> KeypointSet {
        kps(&[
            (0, 0.0, 0.0),
            (1, 10.0, 0.0),
            (2, 10.0, 4.0),
            (3, 0.0, 4.0),
            (4, 10.0, 2.0),
            (5, 0.0, 2.0),
        ])
    }

    #[test]
    fn aligned_trunk_is_its_own_box() {
        let crop = trunk_quad(&aligned_trunk(), &square_config(0.0));
        let q = crop.quad.unwrap();
        let want = [
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 4.0),
            Point::new(0.0, 4.0),
        ];
        for (c, w) in q.corners().iter().zip(want) {
            assert!(close(*c, w, 1e-12), "{c:?} vs {w:?}");
        }
    }

    #[test]
    fn trunk_padding_offsets_each_side() {
        // axis length is 10, padding 0.1 -> 1 px outward on every side
        let q = trunk_quad(&aligned_trunk(), &square_config(0.1)).quad.unwrap();
        let want = [
            Point::new(-1.0, -1.0),
            Point::new(11.0, -1.0),
            Point::new(11.0, 5.0),
            Point::new(-1.0, 5.0),
        ];
        for (c, w) in q.corners().iter().zip(want) {
            assert!(close(*c, w, 1e-12));
        }
    }

    #[test]
    fn trunk_needs_three_points() {
        let k = kps(&[(0, 0.0, 0.0), (1, 10.0, 0.0), (4, 10.0, 2.0), (5, 0.0, 2.0)]);
        assert!(!trunk_quad(&k, &square_config(0.0)).is_valid());
    }

    #[test]
    fn trunk_rotates_with_the_points() {
        let cfg = square_config(0.0);
        let base = trunk_quad(&aligned_trunk(), &cfg).quad.unwrap();
        let theta = 30f64.to_radians();
        let rotated = aligned_trunk().map_visible(|x, y| {
            let p = Point::new(x, y).rotated(theta);
            (p.x, p.y)
        });
        let q = trunk_quad(&rotated, &cfg).quad.unwrap();
        for (c, b) in q.corners().iter().zip(base.corners()) {
            assert!(close(*c, b.rotated(theta), 1e-6));
        }
    }

    #[test]
    fn limb_rect_vertical_and_horizontal() {
        let q = limb_rect(Point::new(0.0, 0.0), Point::new(0.0, 30.0), 1.0 / 3.0).unwrap();
        let want = [
            Point::new(-5.0, 0.0),
            Point::new(5.0, 0.0),
            Point::new(5.0, 30.0),
            Point::new(-5.0, 30.0),
        ];
        for (c, w) in q.corners().iter().zip(want) {
            assert!(close(*c, w, 1e-12), "{c:?}");
        }
        let h = limb_rect(Point::new(0.0, 0.0), Point::new(30.0, 0.0), 1.0 / 3.0).unwrap();
        let ys: Vec<f64> = h.corners().iter().map(|c| c.y).collect();
        assert!(ys.iter().all(|y| (y.abs() - 5.0).abs() < 1e-12));
        assert!((h.area() - 300.0).abs() < 1e-9);
        assert!(limb_rect(Point::new(1.0, 1.0), Point::new(1.0, 1.0), 0.3).is_err());
    }

    #[test]
    fn limb_rect_covers_segment_with_exact_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = Point::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let b = Point::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let ratio = rng.random_range(0.05..1.0);
            let q = limb_rect(a, b, ratio).unwrap();
            let l2 = (b - a).dot(b - a);
            assert!((q.area() - ratio * l2).abs() <= 1e-9 * l2.max(1.0));
            for t in 0..=20 {
                let p = a + (b - a) * (t as f64 / 20.0);
                assert!(q.contains(p, 1e-9));
            }
        }
    }

    #[test]
    fn quad_rejects_bowtie_and_flat() {
        let bowtie = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ];
        assert!(Quad::new(bowtie).is_err());
        let flat = [Point::new(0.0, 0.0); 4];
        assert!(Quad::new(flat).is_err());
    }

    #[test]
    fn crops_follow_visibility() {
        let cfg = PartConfig::default();
        let mut k = kps(&[
            (LEFT_SHOULDER, 30.0, 10.0),
            (LEFT_FRONT_PAW, 30.0, 30.0),
            (RIGHT_SHOULDER, 34.0, 10.0),
            (RIGHT_HIP, 5.0, 10.0),
            (LEFT_HIP, 8.0, 11.0),
            (TAIL_ROOT, 2.0, 8.0),
            (CENTER, 18.0, 12.0),
            (TAIL_PROXIMAL, -6.0, 2.0),
        ]);
        let crops = part_crops(&k, &cfg);
        assert!(crops[PartKind::Trunk.index()].is_valid());
        assert!(crops[PartKind::LimbFl.index()].is_valid());
        assert!(!crops[PartKind::LimbFr.index()].is_valid());
        assert!(crops[PartKind::TailProximal.index()].is_valid());
        assert!(!crops[PartKind::TailDistal.index()].is_valid());
        k.set(LEFT_FRONT_PAW, Keypoint::INVISIBLE);
        assert!(!part_crops(&k, &cfg)[PartKind::LimbFl.index()].is_valid());
    }

    fn textured(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |c, x, y| ((x * 31 + y * 17 + c * 5) % 64) as f32 / 63.0)
    }

    #[test]
    fn axis_aligned_extraction_equals_crop_and_resize() {
        let img = textured(40, 30);
        let quad = Quad::new([
            Point::new(6.0, 4.0),
            Point::new(26.0, 4.0),
            Point::new(26.0, 24.0),
            Point::new(6.0, 24.0),
        ])
        .unwrap();
        let crop = PartCrop {
            part: PartKind::Trunk,
            quad: Some(quad),
        };
        let plain = img.crop(6, 4, 20, 20).unwrap();
        let same = extract_part(&img, &crop, 20, 20).unwrap();
        assert_eq!(same.raster().unwrap(), &plain);
        let resized = extract_part(&img, &crop, 10, 10).unwrap();
        let reference = plain.resize(10, 10);
        for (a, b) in resized.raster().unwrap().data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rotated_quad_extracts_rotated_crop() {
        let img = textured(50, 70);
        // Sub-rectangle x in [10, 30], y in [20, 60], walked from its
        // bottom-left corner so the output is the crop turned a quarter.
        let quad = Quad::new([
            Point::new(10.0, 60.0),
            Point::new(10.0, 20.0),
            Point::new(30.0, 20.0),
            Point::new(30.0, 60.0),
        ])
        .unwrap();
        let crop = PartCrop {
            part: PartKind::LimbFl,
            quad: Some(quad),
        };
        let out = extract_part(&img, &crop, 40, 20).unwrap();
        let want = img.crop(10, 20, 20, 40).unwrap().rotate90();
        let got = out.raster().unwrap();
        assert_eq!((got.width(), got.height()), (want.width(), want.height()));
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn invalid_and_offscreen_crops_yield_marker() {
        let img = textured(20, 20);
        let none = extract_part(&img, &PartCrop::invalid(PartKind::LimbBr), 8, 8).unwrap();
        assert_eq!(none, PartImage::Invalid);
        let far = Quad::new([
            Point::new(100.0, 100.0),
            Point::new(110.0, 100.0),
            Point::new(110.0, 110.0),
            Point::new(100.0, 110.0),
        ])
        .unwrap();
        let crop = PartCrop {
            part: PartKind::LimbBr,
            quad: Some(far),
        };
        assert_eq!(extract_part(&img, &crop, 8, 8).unwrap(), PartImage::Invalid);
    }

    #[test]
    fn partially_outside_quad_is_clamped() {
        let img = textured(20, 20);
        let q = Quad::new([
            Point::new(-5.0, -5.0),
            Point::new(10.0, -5.0),
            Point::new(10.0, 10.0),
            Point::new(-5.0, 10.0),
        ])
        .unwrap();
        let crop = PartCrop {
            part: PartKind::Trunk,
            quad: Some(q),
        };
        let out = extract_part(&img, &crop, 15, 15).unwrap();
        let r = out.raster().unwrap();
        // replicated border: the top-left block repeats pixel (0, 0)
        assert_eq!(r.get(0, 0, 0), img.get(0, 0, 0));
        assert_eq!(r.get(1, 2, 3), img.get(1, 0, 0));
    }

    #[test]
    fn config_validation() {
        assert!(PartConfig::default().validate().is_ok());
        let bad = PartConfig {
            limb_ratio: 0.0,
            ..PartConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PartConfig {
            trunk_keypoints: vec![17],
            ..PartConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
