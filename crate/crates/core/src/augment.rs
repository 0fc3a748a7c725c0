//! Training-time degradations simulating camera-trap conditions.
//!
//! Ops run in a fixed order: blur, noise, perspective, rotation, erase. Each
//! op draws from its own random stream derived from the seed, so enabling or
//! disabling one op never changes the parameters sampled by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Homography, Point};
use crate::raster::{Border, Raster, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnabledOps {
    pub blur: bool,
    pub noise: bool,
    pub perspective: bool,
    pub rotation: bool,
    pub erase: bool,
}

impl Default for EnabledOps {
    fn default() -> Self {
        EnabledOps {
            blur: true,
            noise: true,
            perspective: true,
            rotation: true,
            erase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: EnabledOps,
    /// Gaussian blur sigma, pixels.
    pub blur_sigma_range: [f64; 2],
    /// Additive Gaussian noise std, in `[0, 1]` intensity units.
    pub noise_std_range: [f64; 2],
    /// Max inward corner displacement as a fraction of half the image size.
    pub perspective_distortion: f64,
    /// Rotation angle drawn uniformly from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    pub erase_probability: f64,
    /// Erased area as a fraction of the image.
    pub erase_area_range: [f64; 2],
    /// Fill for erased and rotated-in pixels; the trainer substitutes the
    /// dataset channel mean when unset.
    pub fill: Option<[f32; CHANNELS]>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: EnabledOps::default(),
            blur_sigma_range: [0.0, 2.0],
            noise_std_range: [0.0, 10.0 / 255.0],
            perspective_distortion: 0.2,
            rotation_degrees: 15.0,
            erase_probability: 0.5,
            erase_area_range: [0.02, 0.2],
            fill: None,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: EnabledOps {
                blur: false,
                noise: false,
                perspective: false,
                rotation: false,
                erase: false,
            },
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn range(name: &str, r: [f64; 2], hi: f64) -> Result<()> {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1] <= hi) {
                return Err(Error::Config(format!(
                    "{name} [{}, {}] must satisfy 0 <= lo <= hi <= {hi}",
                    r[0], r[1]
                )));
            }
            Ok(())
        }
        range("blur_sigma_range", self.blur_sigma_range, f64::MAX)?;
        range("noise_std_range", self.noise_std_range, 1.0)?;
        range("erase_area_range", self.erase_area_range, 1.0)?;
        if self.enabled.erase && self.erase_area_range[1] >= 1.0 {
            return Err(Error::Config("erase area must stay below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.erase_probability) {
            return Err(Error::Config("erase_probability must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.perspective_distortion) {
            return Err(Error::Config("perspective_distortion must be in [0, 1)".into()));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return Err(Error::Config("rotation_degrees must be in [0, 180]".into()));
        }
        if let Some(f) = self.fill {
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("fill values must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Validated augmentation pipeline.
#[derive(Debug, Clone)]
pub struct Augmenter {
    config: AugmentConfig,
    fill: [f32; CHANNELS],
}

const STREAM_BLUR: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_PERSPECTIVE: u64 = 3;
const STREAM_ROTATION: u64 = 4;
const STREAM_ERASE: u64 = 5;

fn op_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Result<Self> {
        config.validate()?;
        let fill = config.fill.unwrap_or([0.5; CHANNELS]);
        Ok(Augmenter { config, fill })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn augment(&self, image: &Raster, seed: u64) -> Result<Raster> {
        self.augment_with_transform(image, seed).map(|(r, _)| r)
    }

    /// Also returns the geometric map from input to output coordinates, so
    /// keypoints can follow the image.
    pub fn augment_with_transform(&self, image: &Raster, seed: u64) -> Result<(Raster, Homography)> {
        if image.is_empty() {
            return Err(Error::Validation("cannot augment an empty image".into()));
        }
        let cfg = &self.config;
        let (w, h) = (image.width(), image.height());
        let mut out = image.clone();
        let mut forward = Homography::identity();

        if cfg.enabled.blur {
            let sigma = uniform(&mut op_rng(seed, STREAM_BLUR), cfg.blur_sigma_range);
            out = gaussian_blur(&out, sigma);
        }
        if cfg.enabled.noise {
            let mut rng = op_rng(seed, STREAM_NOISE);
            let std = uniform(&mut rng, cfg.noise_std_range);
            add_noise(&mut out, std, &mut rng);
        }
        if cfg.enabled.perspective && cfg.perspective_distortion > 0.0 {
            let mut rng = op_rng(seed, STREAM_PERSPECTIVE);
            let (wf, hf) = (w as f64, h as f64);
            let dx = cfg.perspective_distortion * wf / 2.0;
            let dy = cfg.perspective_distortion * hf / 2.0;
            let mut jitter = |sx: f64, sy: f64| {
                Point::new(sx * rng.random_range(0.0..=dx), sy * rng.random_range(0.0..=dy))
            };
            let rect = [
                Point::new(0.0, 0.0),
                Point::new(wf, 0.0),
                Point::new(wf, hf),
                Point::new(0.0, hf),
            ];
            let inner = [
                rect[0] + jitter(1.0, 1.0),
                rect[1] + jitter(-1.0, 1.0),
                rect[2] + jitter(-1.0, -1.0),
                rect[3] + jitter(1.0, -1.0),
            ];
            let out_to_src = Homography::from_correspondences(&rect, &inner)?;
            out = out.warp(w, h, &out_to_src, Border::Replicate);
            forward = out_to_src.inverse()?.then_after(&forward);
        }
        if cfg.enabled.rotation && cfg.rotation_degrees > 0.0 {
            let mut rng = op_rng(seed, STREAM_ROTATION);
            let angle = rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees);
            let (rotated, fwd) = rotate(&out, angle, self.fill);
            out = rotated;
            forward = fwd.then_after(&forward);
        }
        if cfg.enabled.erase {
            let mut rng = op_rng(seed, STREAM_ERASE);
            if rng.random_bool(cfg.erase_probability) {
                let frac = uniform(&mut rng, cfg.erase_area_range);
                if frac > 0.0 {
                    erase_with(&mut out, frac, self.fill, &mut rng);
                }
            }
        }
        Ok((out, forward))
    }
}

/// Separable Gaussian blur with replicated borders; `sigma <= 0` is identity.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    if !(sigma > 1e-6) {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (image.width() as i64, image.height() as i64);
    let pass = |src: &Raster, horizontal: bool| {
        Raster::from_fn(src.width(), src.height(), |c, x, y| {
            let mut acc = 0.0f32;
            for (k, weight) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let (sx, sy) = if horizontal {
                    ((x as i64 + off).clamp(0, w - 1), y as i64)
                } else {
                    (x as i64, (y as i64 + off).clamp(0, h - 1))
                };
                acc += weight * src.get(c, sx as usize, sy as usize);
            }
            acc
        })
    };
    let tmp = pass(image, true);
    pass(&tmp, false)
}

fn add_noise(image: &mut Raster, std: f64, rng: &mut ChaCha8Rng) {
    if !(std > 0.0) {
        return;
    }
    let normal = Normal::new(0.0f32, std as f32).expect("std is positive and finite");
    for v in image.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Rotates about the image center, filling uncovered pixels with `fill`.
/// Returns the image and the input-to-output coordinate map.
pub fn rotate(image: &Raster, degrees: f64, fill: [f32; CHANNELS]) -> (Raster, Homography) {
    let center = Point::new(image.width() as f64 / 2.0, image.height() as f64 / 2.0);
    let forward = Homography::rotation(center, degrees);
    if degrees == 0.0 {
        return (image.clone(), forward);
    }
    let back = Homography::rotation(center, -degrees);
    (
        image.warp(image.width(), image.height(), &back, Border::Constant(fill)),
        forward,
    )
}

/// Replaces one axis-aligned rectangle covering `area_fraction` of the image
/// (up to per-side rounding) with `fill`. Everything else is untouched.
pub fn random_erase(image: &Raster, area_fraction: f64, fill: [f32; CHANNELS], seed: u64) -> Raster {
    let mut out = image.clone();
    erase_with(&mut out, area_fraction, fill, &mut op_rng(seed, STREAM_ERASE));
    out
}

/// Chosen erase rectangle `(x, y, w, h)`.
fn erase_rect(width: usize, height: usize, area_fraction: f64, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let target = area_fraction * (width * height) as f64;
    let log_lo = 0.3f64.ln();
    let mut dims = None;
    for _ in 0..10 {
        let aspect = rng.random_range(log_lo..=-log_lo).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / eh.max(1) as f64).round() as usize;
        if eh >= 1 && ew >= 1 && eh <= height && ew <= width {
            dims = Some((ew, eh));
            break;
        }
    }
    let (ew, eh) = dims.unwrap_or_else(|| {
        // fall back to the squarest rectangle that fits
        let eh = (target.sqrt().round() as usize).clamp(1, height);
        let ew = ((target / eh as f64).round() as usize).clamp(1, width);
        let eh = ((target / ew as f64).round() as usize).clamp(1, height);
        (ew, eh)
    });
    let x = rng.random_range(0..=width - ew);
    let y = rng.random_range(0..=height - eh);
    (x, y, ew, eh)
}

fn erase_with(image: &mut Raster, area_fraction: f64, fill: [f32; CHANNELS], rng: &mut ChaCha8Rng) {
    let (x0, y0, ew, eh) = erase_rect(image.width(), image.height(), area_fraction, rng);
    for y in y0..y0 + eh {
        for x in x0..x0 + ew {
            image.put_pixel(x, y, fill);
        }
    }
}
