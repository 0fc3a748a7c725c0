//! Contact sheet of one query and its top-k gallery images.

use std::path::Path;

use serde::Serialize;

use super::EvalReport;
use crate::error::{Error, Result};
use crate::raster::Raster;

const QUERY: [f32; 3] = [0.1, 0.35, 0.95];
const MATCH: [f32; 3] = [0.1, 0.8, 0.2];
const MISMATCH: [f32; 3] = [0.9, 0.1, 0.1];

#[derive(Debug, Clone, Copy)]
pub struct SheetStyle {
    /// Tile `[width, height]`.
    pub tile: [usize; 2],
    pub border: usize,
    pub gap: usize,
}

impl Default for SheetStyle {
    fn default() -> Self {
        SheetStyle {
            tile: [160, 120],
            border: 5,
            gap: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TileLabel {
    Query,
    Match,
    Mismatch,
}

fn frame(tile: &mut Raster, width: usize, color: [f32; 3]) {
    let (w, h) = (tile.width(), tile.height());
    for y in 0..h {
        for x in 0..w {
            if x < width || y < width || x + width >= w || y + width >= h {
                tile.put_pixel(x, y, color);
            }
        }
    }
}

/// Small diagonal cross in the top-left corner, so mismatches do not rely on
/// colour alone.
fn cross(tile: &mut Raster, inset: usize, color: [f32; 3]) {
    let size = (tile.width().min(tile.height()) / 5).max(3);
    for i in 0..size {
        for t in 0..2 {
            let (x, y) = (inset + i + t, inset + i);
            if x < tile.width() && y < tile.height() {
                tile.put_pixel(x, y, color);
            }
            let x2 = inset + size - 1 - i + t;
            if x2 < tile.width() && y < tile.height() {
                tile.put_pixel(x2, y, color);
            }
        }
    }
}

/// Writes the query tile followed by its `k` nearest gallery images, framed
/// by match status, and returns the tile labels left to right.
pub fn render_ranking_sheet(
    report: &EvalReport,
    query_index: usize,
    k: usize,
    style: SheetStyle,
    out: &Path,
) -> Result<Vec<TileLabel>> {
    let q = report
        .per_query
        .get(query_index)
        .ok_or_else(|| Error::Validation(format!("query index {query_index} out of range")))?;
    if k == 0 || k > q.ranking.len() {
        return Err(Error::Validation(format!(
            "k = {k} must be between 1 and the gallery size {}",
            q.ranking.len()
        )));
    }
    let mut tiles = vec![(q.image_path.clone(), TileLabel::Query)];
    tiles.extend(q.ranking[..k].iter().map(|e| {
        (
            e.image_path.clone(),
            if e.is_match { TileLabel::Match } else { TileLabel::Mismatch },
        )
    }));
    let missing: Vec<_> = tiles.iter().filter(|(p, _)| !p.is_file()).map(|(p, _)| p.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }

    let [tw, th] = style.tile;
    let width = tiles.len() * tw + (tiles.len() + 1) * style.gap;
    let height = th + 2 * style.gap;
    let mut sheet = Raster::filled(width, height, [1.0; 3]);
    for (i, (path, label)) in tiles.iter().enumerate() {
        let mut tile = Raster::load(path)?.resize(tw, th);
        let color = match label {
            TileLabel::Query => QUERY,
            TileLabel::Match => MATCH,
            TileLabel::Mismatch => MISMATCH,
        };
        frame(&mut tile, style.border, color);
        if *label == TileLabel::Mismatch {
            cross(&mut tile, style.border + 2, MISMATCH);
        }
        let x0 = style.gap + i * (tw + style.gap);
        for y in 0..th {
            for x in 0..tw {
                sheet.put_pixel(x0 + x, style.gap + y, tile.pixel(x, y));
            }
        }
    }
    sheet.save_png(out)?;
    Ok(tiles.into_iter().map(|(_, l)| l).collect())
}
