//! Procedural toy cats for end-to-end runs without real camera-trap data.
//!
//! Each cat has a coat hue; each (cat, side) pair has its own stripe and
//! blotch pattern drawn in body coordinates, so the pattern follows the pose.
//! Night images are darker, less saturated and noisier. Keypoints come from
//! the same template transform that draws the silhouette.

use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, ImageRecord, Keypoint, KeypointSet, Side, TimeOfDay, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::raster::Raster;
use crate::trainer::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub cats: usize,
    pub images_per_entity: usize,
    /// The first this-many cats also get daytime images.
    pub day_cats: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Chance that one limb or the tail is hidden behind vegetation.
    pub occlusion_probability: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            cats: 4,
            images_per_entity: 20,
            day_cats: 1,
            width: 160,
            height: 112,
            seed: 0,
            occlusion_probability: 0.15,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cats == 0 || self.images_per_entity == 0 {
            return Err(Error::Config("toy data needs at least one cat and one image per entity".into()));
        }
        if self.day_cats > self.cats {
            return Err(Error::Config("day_cats cannot exceed cats".into()));
        }
        if self.width < 64 || self.height < 48 {
            return Err(Error::Config("toy images must be at least 64x48".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(Error::Config("occlusion_probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn entity_count(&self) -> usize {
        2 * self.cats + 2 * self.day_cats
    }
}

/// Template keypoints in body-length units; head towards +u, down is +v.
const TEMPLATE: [(f64, f64); NUM_KEYPOINTS] = [
    (0.50, -0.27),  // left ear
    (0.61, -0.27),  // right ear
    (0.69, -0.10),  // nose
    (0.27, 0.02),   // right shoulder
    (0.31, 0.50),   // right front paw
    (0.31, 0.00),   // left shoulder
    (0.38, 0.48),   // left front paw
    (-0.27, 0.02),  // right hip
    (-0.21, 0.28),  // right knee
    (-0.30, 0.50),  // right back paw
    (-0.24, 0.00),  // left hip
    (-0.17, 0.27),  // left knee
    (-0.22, 0.48),  // left back paw
    (-0.44, -0.04), // tail root
    (0.00, 0.02),   // center
    (-0.62, -0.16), // tail middle
    (-0.74, -0.38), // tail tip
];

const HEAD: (f64, f64, f64) = (0.56, -0.12, 0.14);
const BODY: (f64, f64, f64, f64) = (0.0, 0.0, 0.44, 0.17);
const LEG_HALF_WIDTH: f64 = 0.045;
const TAIL_HALF_WIDTH: f64 = 0.035;

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

#[derive(Clone, Copy, PartialEq)]
enum Region {
    Body,
    Head,
    Limb,
    Tail,
}

/// Limb polylines by keypoint index, in [front-left, front-right,
/// back-left, back-right] order.
const LIMBS: [&[usize]; 4] = [&[5, 6], &[3, 4], &[10, 11, 12], &[7, 8, 9]];
const TAIL: [usize; 3] = [13, 15, 16];

fn region_at(u: f64, v: f64, hidden: Option<usize>) -> Option<Region> {
    let t = |i: usize| TEMPLATE[i];
    let on_path = |path: &[usize], w: f64| path.windows(2).any(|s| seg_dist((u, v), t(s[0]), t(s[1])) < w);
    if ((u - HEAD.0).powi(2) + (v - HEAD.1).powi(2)).sqrt() < HEAD.2 {
        return Some(Region::Head);
    }
    for ear in [0, 1] {
        let (ex, ey) = t(ear);
        if (u - ex).abs() < 0.05 && v > ey && v < ey + 0.09 && (u - ex).abs() < (v - ey) * 0.7 {
            return Some(Region::Head);
        }
    }
    if ((u - BODY.0) / BODY.2).powi(2) + ((v - BODY.1) / BODY.3).powi(2) < 1.0 {
        return Some(Region::Body);
    }
    for (i, limb) in LIMBS.iter().enumerate() {
        if hidden != Some(i) && on_path(limb, LEG_HALF_WIDTH) {
            return Some(Region::Limb);
        }
    }
    if hidden != Some(4) && on_path(&TAIL, TAIL_HALF_WIDTH) {
        return Some(Region::Tail);
    }
    None
}

/// Coat pattern of one flank.
#[derive(Debug, Clone)]
struct Coat {
    hue: f64,
    saturation: f64,
    value: f64,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_phase: f64,
    stripe_duty: f64,
    blotches: Vec<(f64, f64, f64)>,
}

impl Coat {
    fn new(cat: usize, cats: usize, side: Side, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xC0A7, cat as u64, side as u64]));
        // flanks are spread evenly around the colour wheel, the two flanks
        // of one cat next to each other
        let flank = if side == Side::Left { 0 } else { 1 };
        let hue = ((2 * cat + flank) as f64 + 0.25) / (2 * cats) as f64;
        let blotches = (0..rng.random_range(2..5))
            .map(|_| {
                (
                    rng.random_range(-0.35..0.35),
                    rng.random_range(-0.12..0.14),
                    rng.random_range(0.05..0.10),
                )
            })
            .collect();
        Coat {
            hue,
            saturation: 0.75,
            value: 0.85,
            stripe_freq: rng.random_range(5.0..11.0),
            stripe_angle: rng.random_range(-1.4..1.4),
            stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
            stripe_duty: rng.random_range(0.25..0.45),
            blotches,
        }
    }

    fn color(&self, u: f64, v: f64, region: Region) -> [f64; 3] {
        let mut val = self.value;
        let mut sat = self.saturation;
        let s = (u * self.stripe_angle.cos() + v * self.stripe_angle.sin()) * self.stripe_freq + self.stripe_phase
            / std::f64::consts::TAU;
        if s.rem_euclid(1.0) < self.stripe_duty && region != Region::Head {
            val *= 0.35;
        }
        for &(bu, bv, r) in &self.blotches {
            if ((u - bu).powi(2) + (v - bv).powi(2)).sqrt() < r {
                sat *= 0.15;
                val = 0.95;
            }
        }
        // soft top light
        val *= 1.0 - 0.35 * (v + 0.3).clamp(0.0, 1.0);
        hsv(self.hue, sat, val)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Smooth value noise from a coarse random grid.
struct ValueNoise {
    grid: Vec<f64>,
    gw: usize,
    gh: usize,
    cell: f64,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: f64) -> Self {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        ValueNoise {
            grid: (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect(),
            gw,
            gh,
            cell,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx.fract(), gy.fract());
        let g = |i: usize, j: usize| self.grid[j.min(self.gh - 1) * self.gw + i.min(self.gw - 1)];
        let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
        let bottom = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// One rendered image with its annotation.
#[derive(Debug, Clone)]
pub struct ToyImage {
    pub raster: Raster,
    pub keypoints: KeypointSet,
    pub bbox: BBox,
}

/// Renders one image of `cat` seen from `side`.
pub fn render_cat(cfg: &ToyConfig, cat: usize, side: Side, tod: TimeOfDay, seed: u64) -> ToyImage {
    let coat = Coat::new(cat, cfg.cats, side, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let length = w * rng.random_range(0.50..0.60);
    let angle = rng.random_range(-12f64..12.0).to_radians();
    let mirror = if side == Side::Left { -1.0 } else { 1.0 };
    // template extents: u in [-0.8, 0.72], v in [-0.4, 0.55]
    let cx = rng.random_range(0.42..0.58) * w;
    let cy = rng.random_range(0.45..0.55) * h;
    let (sin, cos) = angle.sin_cos();
    let to_image = |u: f64, v: f64| -> (f64, f64) {
        let (a, b) = (mirror * u * length, v * length);
        (cx + a * cos - b * sin, cy + a * sin + b * cos)
    };
    let to_template = |x: f64, y: f64| -> (f64, f64) {
        let (dx, dy) = (x - cx, y - cy);
        let (a, b) = (dx * cos + dy * sin, -dx * sin + dy * cos);
        (mirror * a / length, b / length)
    };
    let hidden = if rng.random_bool(cfg.occlusion_probability) {
        Some(rng.random_range(0..5usize))
    } else {
        None
    };

    let night = tod == TimeOfDay::Night;
    let noise = ValueNoise::new(&mut rng, cfg.width, cfg.height, 14.0);
    let ground = if night {
        [0.16, 0.17, 0.19]
    } else {
        [
            rng.random_range(0.35..0.5),
            rng.random_range(0.45..0.6),
            rng.random_range(0.25..0.35),
        ]
    };
    let grain = Normal::new(0.0, if night { 0.045 } else { 0.015 }).expect("finite std");
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    let mut data = vec![0f32; 3 * cfg.width * cfg.height];
    let plane = cfg.width * cfg.height;
    for py in 0..cfg.height {
        for px in 0..cfg.width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let (u, v) = to_template(x, y);
            let mut rgb = match region_at(u, v, hidden) {
                Some(region) => {
                    x0 = x0.min(px as f64);
                    y0 = y0.min(py as f64);
                    x1 = x1.max(px as f64 + 1.0);
                    y1 = y1.max(py as f64 + 1.0);
                    coat.color(u, v, region)
                }
                None => {
                    let n = 0.75 + 0.5 * noise.at(x, y);
                    ground.map(|g| g * n)
                }
            };
            if night {
                rgb = rgb.map(|c| c * 0.6 + 0.04);
            }
            for c in 0..3 {
                let val = rgb[c] + grain.sample(&mut rng);
                data[c * plane + py * cfg.width + px] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let hidden_kps: &[usize] = match hidden {
        Some(4) => &[15, 16],
        Some(i) => &LIMBS[i][1..],
        None => &[],
    };
    let mut kps = [Keypoint::INVISIBLE; NUM_KEYPOINTS];
    for (i, &(u, v)) in TEMPLATE.iter().enumerate() {
        if hidden_kps.contains(&i) {
            continue;
        }
        let (x, y) = to_image(u, v);
        if x >= 0.0 && y >= 0.0 && x <= w && y <= h {
            kps[i] = Keypoint::visible(x, y);
        }
    }
    let margin = 3.0;
    let bx0 = (x0 - margin).max(0.0);
    let by0 = (y0 - margin).max(0.0);
    let bbox = BBox {
        x: bx0,
        y: by0,
        w: (x1 + margin).min(w) - bx0,
        h: (y1 + margin).min(h) - by0,
    };
    // keypoints that landed just outside the tight box are still on the cat
    for kp in kps.iter_mut().filter(|k| k.visible) {
        kp.x = kp.x.clamp(bbox.x, bbox.x + bbox.w);
        kp.y = kp.y.clamp(bbox.y, bbox.y + bbox.h);
    }
    ToyImage {
        raster: Raster::from_chw(cfg.width, cfg.height, data).expect("sized buffer"),
        keypoints: KeypointSet::new(kps),
        bbox,
    }
}

/// Generated dataset on disk.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub manifest: PathBuf,
    pub records: Vec<ImageRecord>,
}

/// Writes `images/*.png` and `manifest.jsonl` under `out`.
pub fn generate(cfg: &ToyConfig, out: &Path) -> Result<ToyDataset> {
    cfg.validate()?;
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut jobs = Vec::new();
    for cat in 0..cfg.cats {
        let mut times = vec![TimeOfDay::Night];
        if cat < cfg.day_cats {
            times.insert(0, TimeOfDay::Day);
        }
        for side in [Side::Left, Side::Right] {
            for &tod in &times {
                for n in 0..cfg.images_per_entity {
                    jobs.push((cat, side, tod, n));
                }
            }
        }
    }
    let base = NaiveDate::from_ymd_opt(2024, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    let records = jobs
        .par_iter()
        .map(|&(cat, side, tod, n)| {
            let seed = derive_seed(&[cfg.seed, cat as u64, side as u64, tod as u64, n as u64]);
            let img = render_cat(cfg, cat, side, tod, seed);
            let rel = PathBuf::from("images").join(format!("cat{cat}_{}_{}_{n:03}.png", side.as_str(), tod.as_str()));
            img.raster.save_png(&out.join(&rel))?;
            let hour = if tod == TimeOfDay::Day { 12 } else { 23 };
            Ok(ImageRecord {
                image_path: rel,
                cat_id: format!("cat{cat}"),
                side,
                time_of_day: tod,
                capture_time: Some(base + Duration::days(n as i64 + 40 * cat as i64) + Duration::hours(hour)),
                camera_id: format!("cam{}", n % 3),
                bbox: img.bbox,
                keypoints: img.keypoints,
                image_width: Some(cfg.width as u32),
                image_height: Some(cfg.height as u32),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(ToyDataset { manifest, records })
}

/// Template keypoint position for `index` (body-length units), exposed for
/// tests of the generator's geometry.
pub fn template_point(index: usize) -> Point {
    Point::new(TEMPLATE[index].0, TEMPLATE[index].1)
}
