//! Planar RGB float images.
//!
//! Pixel values live in `[0, 1]`. Continuous coordinates follow the
//! convention that pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`, so its
//! center sits at `(i + 0.5, j + 0.5)`. Keypoints and quads use the same
//! coordinates.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Homography, Point};

pub const CHANNELS: usize = 3;

/// How samples falling outside the image are resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Border {
    Replicate,
    Constant([f32; CHANNELS]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    /// Channel-major (CHW) storage.
    data: Vec<f32>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, value: [f32; CHANNELS]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for v in value {
            data.extend(std::iter::repeat_n(v, width * height));
        }
        Raster {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Raster {
            width,
            height,
            data,
        }
    }

    pub fn from_chw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::Validation(format!(
                "raster buffer has {} values, expected {}",
                data.len(),
                width * height * CHANNELS
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; CHANNELS] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, v: [f32; CHANNELS]) {
        for (c, value) in v.into_iter().enumerate() {
            self.set(c, x, y, value);
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Ok(Raster::from_fn(w as usize, h as usize, |c, x, y| {
            rgb.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0)
        }))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn channel_means(&self) -> [f32; CHANNELS] {
        let n = (self.width * self.height).max(1) as f64;
        let mut out = [0.0f32; CHANNELS];
        for (c, plane) in self.data.chunks(self.width * self.height).enumerate() {
            out[c] = (plane.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    /// Bilinear sample at continuous coordinates.
    pub fn sample(&self, c: usize, p: Point, border: Border) -> f32 {
        let fx = p.x - 0.5;
        let fy = p.y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v00 = self.texel(c, x0, y0, border);
        if tx == 0.0 && ty == 0.0 {
            return v00;
        }
        let v10 = self.texel(c, x0 + 1, y0, border);
        let v01 = self.texel(c, x0, y0 + 1, border);
        let v11 = self.texel(c, x0 + 1, y0 + 1, border);
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }

    fn texel(&self, c: usize, x: i64, y: i64, border: Border) -> f32 {
        let inside = x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height;
        if inside {
            return self.get(c, x as usize, y as usize);
        }
        match border {
            Border::Constant(v) => v[c],
            Border::Replicate => {
                let xc = x.clamp(0, self.width as i64 - 1) as usize;
                let yc = y.clamp(0, self.height as i64 - 1) as usize;
                self.get(c, xc, yc)
            }
        }
    }

    /// Resample into a `width x height` raster; `map` sends output
    /// coordinates to source coordinates.
    pub fn warp(&self, width: usize, height: usize, map: &Homography, border: Border) -> Raster {
        let mut out = Raster::filled(width, height, [0.0; CHANNELS]);
        for y in 0..height {
            for x in 0..width {
                let src = map.apply(Point::new(x as f64 + 0.5, y as f64 + 0.5));
                for c in 0..CHANNELS {
                    out.set(c, x, y, self.sample(c, src, border));
                }
            }
        }
        out
    }

    /// Integer crop; the rectangle must lie inside the raster.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Raster> {
        if x + width > self.width || y + height > self.height || width == 0 || height == 0 {
            return Err(Error::Geometry(format!(
                "crop {width}x{height}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Raster::from_fn(width, height, |c, i, j| {
            self.get(c, x + i, y + j)
        }))
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let map = Homography::scale(
            self.width as f64 / width as f64,
            self.height as f64 / height as f64,
        );
        self.warp(width, height, &map, Border::Replicate)
    }

    /// Quarter turn clockwise as displayed (x right, y down).
    pub fn rotate90(&self) -> Raster {
        let (w, h) = (self.width, self.height);
        Raster::from_fn(h, w, |c, x, y| self.get(c, y, h - 1 - x))
    }

    /// Copies `other` with its top-left corner at `(x0, y0)`, clipped to this raster.
    pub fn paste(&mut self, other: &Raster, x0: usize, y0: usize) {
        for y in 0..other.height.min(self.height.saturating_sub(y0)) {
            for x in 0..other.width.min(self.width.saturating_sub(x0)) {
                self.put_pixel(x0 + x, y0 + y, other.pixel(x, y));
            }
        }
    }

    /// Sets the pixel containing `p` if it lies inside the raster.
    fn plot(&mut self, p: Point, color: [f32; CHANNELS]) {
        if p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64 {
            self.put_pixel(p.x as usize, p.y as usize, color);
        }
    }

    /// One-pixel line between two continuous points, clipped to the raster.
    pub fn draw_segment(&mut self, a: Point, b: Point, color: [f32; CHANNELS]) {
        let steps = (b - a).norm().ceil().max(1.0) as usize * 2;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.plot(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)), color);
        }
    }

    /// Filled disc of the given radius in pixels.
    pub fn draw_dot(&mut self, center: Point, radius: f64, color: [f32; CHANNELS]) {
        let r = radius.ceil() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let offset = Point::new(dx as f64, dy as f64);
                if offset.norm() <= radius {
                    self.plot(Point::new(center.x + offset.x, center.y + offset.y), color);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |c, x, y| ((x * 7 + y * 13 + c * 29) % 97) as f32 / 96.0)
    }

    #[test]
    fn sampling_pixel_centers_is_exact() {
        let r = ramp(9, 5);
        for y in 0..5 {
            for x in 0..9 {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(r.sample(1, p, Border::Replicate), r.get(1, x, y));
            }
        }
    }

    #[test]
    fn identity_warp_and_resize_are_noops() {
        let r = ramp(12, 8);
        assert_eq!(r.warp(12, 8, &Homography::identity(), Border::Replicate), r);
        assert_eq!(r.resize(12, 8), r);
    }

    #[test]
    fn rotate90_four_times_is_identity() {
        let r = ramp(7, 4);
        assert_eq!(r.rotate90().rotate90().rotate90().rotate90(), r);
        let q = r.rotate90();
        assert_eq!((q.width(), q.height()), (4, 7));
        // top-left of the rotated image is bottom-left of the source
        assert_eq!(q.get(0, 0, 0), r.get(0, 0, 3));
    }

    #[test]
    fn crop_outside_is_rejected() {
        let r = ramp(10, 10);
        assert!(r.crop(5, 5, 6, 2).is_err());
        let c = r.crop(2, 3, 4, 5).unwrap();
        assert_eq!(c.get(2, 1, 1), r.get(2, 3, 4));
    }

    #[test]
    fn constant_border_fills_outside() {
        let r = Raster::filled(4, 4, [0.2, 0.4, 0.6]);
        let v = r.sample(2, Point::new(-10.0, 2.0), Border::Constant([0.0, 0.0, 1.0]));
        assert_eq!(v, 1.0);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let r = ramp(6, 3);
        r.save_png(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
