//! Turning a record into network inputs: box crop, augmentation, part
//! extraction and resizing.

use crate::augment::Augmenter;
use crate::data::{ImageRecord, KeypointSet};
use crate::error::Result;
use crate::geometry::{extract_part, part_crops, PartConfig, PartImage, PartKind};
use crate::network::{SampleImages, StreamConfig};
use crate::raster::Raster;

/// The record's bounding box cut out of `image`, with keypoints shifted into
/// the crop's frame.
pub fn crop_to_box(image: &Raster, record: &ImageRecord) -> Result<(Raster, KeypointSet)> {
    let (x, y, w, h) = record.bbox.pixel_window(image.width(), image.height());
    let crop = image.crop(x, y, w, h)?;
    let kps = record
        .keypoints
        .map_visible(|kx, ky| (kx - x as f64, ky - y as f64));
    Ok((crop, kps))
}

/// Builds the full image and the seven part images for one sample.
/// `augment` carries the augmenter and the per-sample seed.
pub fn prepare_sample(
    cropped: &Raster,
    keypoints: &KeypointSet,
    augment: Option<(&Augmenter, u64)>,
    parts: &PartConfig,
    stream: &StreamConfig,
) -> Result<SampleImages> {
    let (image, kps) = match augment {
        Some((aug, seed)) => {
            let (img, map) = aug.augment_with_transform(cropped, seed)?;
            let kps = keypoints.map_visible(|x, y| {
                let p = map.apply(crate::geometry::Point::new(x, y));
                (p.x, p.y)
            });
            (img, kps)
        }
        None => (cropped.clone(), keypoints.clone()),
    };
    let crops = part_crops(&kps, parts);
    let mut out: Vec<PartImage> = Vec::with_capacity(crops.len());
    for crop in &crops {
        let [w, h] = stream.part_input(crop.part);
        out.push(extract_part(&image, crop, w, h)?);
    }
    let [fw, fh] = stream.full_input;
    Ok(SampleImages {
        full: image.resize(fw, fh),
        parts: out.try_into().expect("seven part crops"),
    })
}

/// Part crops for display: every valid part, in [`PartKind::ALL`] order.
pub fn preview_parts(sample: &SampleImages) -> Vec<(PartKind, Option<&Raster>)> {
    PartKind::ALL
        .iter()
        .map(|&p| (p, sample.parts[p.index()].raster()))
        .collect()
}
