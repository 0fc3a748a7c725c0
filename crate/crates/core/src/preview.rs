//! Visual audit images: part quads drawn over the source crop and
//! contact sheets of crops.

use crate::data::KeypointSet;
use crate::geometry::{PartCrop, PartKind, Point};
use crate::raster::Raster;

const KEYPOINT: [f32; 3] = [1.0, 1.0, 1.0];
const EMPTY_TILE: [f32; 3] = [0.5, 0.5, 0.5];
const EMPTY_MARK: [f32; 3] = [0.85, 0.1, 0.1];
const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

/// Display colour of each part, indexed like [`PartKind::ALL`].
pub fn part_color(part: PartKind) -> [f32; 3] {
    match part {
        PartKind::Trunk => [1.0, 0.85, 0.0],
        PartKind::LimbFl => [0.0, 0.8, 1.0],
        PartKind::LimbFr => [0.0, 0.4, 1.0],
        PartKind::LimbBl => [0.2, 1.0, 0.3],
        PartKind::LimbBr => [0.0, 0.6, 0.2],
        PartKind::TailProximal => [1.0, 0.3, 0.8],
        PartKind::TailDistal => [0.7, 0.0, 0.9],
    }
}

/// Copy of `image` with every located part quad outlined in its colour and
/// the visible keypoints marked.
pub fn draw_overlay(image: &Raster, keypoints: &KeypointSet, crops: &[PartCrop]) -> Raster {
    let mut out = image.clone();
    for crop in crops {
        if let Some(quad) = &crop.quad {
            let c = quad.corners();
            for i in 0..4 {
                out.draw_segment(c[i], c[(i + 1) % 4], part_color(crop.part));
            }
        }
    }
    let radius = (image.width().min(image.height()) as f64 / 80.0).max(1.5);
    for k in keypoints.points() {
        if k.visible {
            out.draw_dot(Point::new(k.x, k.y), radius, KEYPOINT);
        }
    }
    out
}

/// Grid of tiles, one row per entry of `rows`. Each image is resized to
/// `tile`; a missing image becomes a grey tile with a red diagonal.
pub fn contact_sheet(rows: &[Vec<Option<&Raster>>], tile: [usize; 2], gap: usize) -> Raster {
    let [tw, th] = tile;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * tw + (cols + 1) * gap;
    let height = rows.len() * th + (rows.len() + 1) * gap;
    let mut sheet = Raster::filled(width.max(1), height.max(1), BACKGROUND);
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let tile = match cell {
                Some(img) => img.resize(tw, th),
                None => {
                    let mut t = Raster::filled(tw, th, EMPTY_TILE);
                    t.draw_segment(Point::new(0.0, 0.0), Point::new(tw as f64, th as f64), EMPTY_MARK);
                    t
                }
            };
            sheet.paste(&tile, gap + c * (tw + gap), gap + r * (th + gap));
        }
    }
    sheet
}
