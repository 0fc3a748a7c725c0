//! JSON-lines manifest reader.

use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, NaiveTime, Timelike};
use serde::Deserialize;

use super::{
    dedup_sequences, resolve, time_format, BBox, Dataset, ImageRecord, Keypoint, KeypointSet,
    PartitionSetting, Side, TimeOfDay, NUM_KEYPOINTS,
};
use crate::error::{Error, LineError, Result};

/// Local-time window classified as daytime; `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
}

impl Default for DayWindow {
    fn default() -> Self {
        DayWindow {
            start: NaiveTime::from_hms_opt(6, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(18, 0, 0).unwrap(),
        }
    }
}

impl DayWindow {
    /// Window from `HH:MM` or `HH:MM:SS` bounds.
    pub fn parse(start: &str, end: &str) -> Result<Self> {
        let time = |s: &str| {
            NaiveTime::parse_from_str(s, "%H:%M:%S")
                .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M"))
                .map_err(|_| Error::Config(format!("'{s}' is not a time of day (HH:MM)")))
        };
        Ok(DayWindow {
            start: time(start)?,
            end: time(end)?,
        })
    }

    pub fn classify(&self, t: &NaiveDateTime) -> TimeOfDay {
        let time = t.time().with_nanosecond(0).unwrap_or(t.time());
        let inside = if self.start <= self.end {
            time >= self.start && time < self.end
        } else {
            time >= self.start || time < self.end
        };
        if inside {
            TimeOfDay::Day
        } else {
            TimeOfDay::Night
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Report malformed lines and keep going instead of failing.
    pub skip_invalid: bool,
    pub day_window: DayWindow,
    pub partition: PartitionSetting,
    /// Drop burst frames closer than this many seconds to the previous frame
    /// of the same camera and cat.
    pub dedup_seconds: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            skip_invalid: false,
            day_window: DayWindow::default(),
            partition: PartitionSetting::FULL,
            dedup_seconds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestLoad {
    pub dataset: Dataset,
    /// Lines rejected as invalid (only populated with `skip_invalid`).
    pub rejected: Vec<LineError>,
    /// Lines excluded because the side is unknown (front/back views).
    pub excluded_unknown_side: Vec<usize>,
    /// Records removed by sequence de-duplication.
    pub deduplicated: usize,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_path: PathBuf,
    cat_id: String,
    side: Side,
    #[serde(default)]
    time_of_day: Option<TimeOfDay>,
    #[serde(default)]
    capture_time: Option<String>,
    #[serde(default)]
    camera_id: Option<String>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    keypoints: Vec<[f64; 3]>,
    #[serde(default)]
    image_width: Option<u32>,
    #[serde(default)]
    image_height: Option<u32>,
}

/// Bounding box written by an external detector next to the image as
/// `<image file name>.bbox.json`.
#[derive(Deserialize)]
struct DetectorSidecar {
    bbox: [f64; 4],
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut name = image.file_name().unwrap_or_default().to_os_string();
    name.push(".bbox.json");
    image.with_file_name(name)
}

/// Strict load with default options: any invalid line fails the whole load.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    load_manifest_with(path, &LoadOptions::default()).map(|l| l.dataset)
}

pub fn load_manifest_with(path: &Path, options: &LoadOptions) -> Result<ManifestLoad> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut excluded = Vec::new();
    let mut warnings = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, &root, options, &mut warnings, line_no) {
            Ok(r) if r.side == Side::Unknown => excluded.push(line_no),
            Ok(r) => records.push(r),
            Err(message) => errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }

    if !errors.is_empty() && !options.skip_invalid {
        return Err(Error::Manifest(errors));
    }
    for e in &errors {
        log::warn!("skipping manifest {e}");
    }

    let mut dataset = Dataset::new(root, records, options.partition)?;
    let mut deduplicated = 0;
    if let Some(seconds) = options.dedup_seconds {
        let before = dataset.len();
        dataset = dedup_sequences(&dataset, seconds);
        deduplicated = before - dataset.len();
    }
    Ok(ManifestLoad {
        dataset,
        rejected: errors,
        excluded_unknown_side: excluded,
        deduplicated,
        warnings,
    })
}

fn parse_line(
    line: &str,
    root: &Path,
    options: &LoadOptions,
    warnings: &mut Vec<String>,
    line_no: usize,
) -> std::result::Result<ImageRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;

    if raw.keypoints.len() > NUM_KEYPOINTS {
        return Err(format!(
            "{} keypoints listed, at most {NUM_KEYPOINTS} allowed",
            raw.keypoints.len()
        ));
    }
    let capture_time = match &raw.capture_time {
        Some(s) => Some(time_format::parse(s).ok_or_else(|| format!("unparseable capture_time '{s}'"))?),
        None => None,
    };
    let time_of_day = match (raw.time_of_day, &capture_time) {
        (Some(t), _) => t,
        (None, Some(t)) => options.day_window.classify(t),
        (None, None) => return Err("time_of_day missing and no capture_time to derive it".into()),
    };

    let image_path = resolve(root, &raw.image_path);
    let bbox = match raw.bbox {
        Some(b) => BBox::from(b),
        None => read_sidecar(&image_path)?,
    };
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(format!(
            "bbox must have positive width and height, got w={} h={}",
            bbox.w, bbox.h
        ));
    }

    let (width, height) = match (raw.image_width, raw.image_height) {
        (Some(w), Some(h)) => (w, h),
        _ => image::image_dimensions(&image_path).map_err(|e| {
            format!(
                "cannot read dimensions of '{}': {e}",
                image_path.display()
            )
        })?,
    };
    if bbox.x < 0.0
        || bbox.y < 0.0
        || bbox.x + bbox.w > width as f64
        || bbox.y + bbox.h > height as f64
    {
        return Err(format!(
            "bbox [{}, {}, {}, {}] exceeds image bounds {width}x{height}",
            bbox.x, bbox.y, bbox.w, bbox.h
        ));
    }

    let mut points: Vec<Keypoint> = raw
        .keypoints
        .iter()
        .map(|k| Keypoint {
            x: k[0],
            y: k[1],
            visible: k[2] > 0.0 && k[0].is_finite() && k[1].is_finite(),
        })
        .collect();
    for (idx, kp) in points.iter_mut().enumerate() {
        if kp.visible && !bbox.contains(kp.x, kp.y) {
            kp.visible = false;
            warnings.push(format!(
                "line {line_no}: keypoint {idx} lies outside the bbox; marked invisible"
            ));
        }
    }
    let keypoints = KeypointSet::from_partial(&points).expect("length checked above");

    Ok(ImageRecord {
        image_path: raw.image_path,
        cat_id: raw.cat_id,
        side: raw.side,
        time_of_day,
        capture_time,
        camera_id: raw.camera_id.unwrap_or_default(),
        bbox,
        keypoints,
        image_width: Some(width),
        image_height: Some(height),
    })
}

fn read_sidecar(image_path: &Path) -> std::result::Result<BBox, String> {
    let side = sidecar_path(image_path);
    let text = std::fs::read_to_string(&side)
        .map_err(|_| "record has no bbox and no detector side-car file".to_string())?;
    let car: DetectorSidecar = serde_json::from_str(&text)
        .map_err(|e| format!("malformed detector side-car '{}': {e}", side.display()))?;
    Ok(BBox::from(car.bbox))
}
