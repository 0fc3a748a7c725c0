//! Annotated image records, entity labelling and train/test partitioning.

mod manifest;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use manifest::{load_manifest, load_manifest_with, DayWindow, LoadOptions, ManifestLoad};
pub use split::{dedup_sequences, derive_entities, split_train_test};

/// Number of annotated keypoints per image: 15 body joints plus the
/// proximal and distal tail points.
pub const NUM_KEYPOINTS: usize = 17;
pub const TAIL_PROXIMAL: usize = 15;
pub const TAIL_DISTAL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub const INVISIBLE: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };

    pub fn visible(x: f64, y: f64) -> Self {
        Keypoint {
            x,
            y,
            visible: true,
        }
    }
}

/// Always exactly [`NUM_KEYPOINTS`] entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointSet([Keypoint; NUM_KEYPOINTS]);

impl Default for KeypointSet {
    fn default() -> Self {
        KeypointSet([Keypoint::INVISIBLE; NUM_KEYPOINTS])
    }
}

impl KeypointSet {
    pub fn new(points: [Keypoint; NUM_KEYPOINTS]) -> Self {
        KeypointSet(points)
    }

    /// Pads missing trailing entries as invisible.
    pub fn from_partial(points: &[Keypoint]) -> Option<Self> {
        if points.len() > NUM_KEYPOINTS {
            return None;
        }
        let mut set = KeypointSet::default();
        set.0[..points.len()].copy_from_slice(points);
        Some(set)
    }

    pub fn get(&self, index: usize) -> Keypoint {
        self.0[index]
    }

    pub fn set(&mut self, index: usize, kp: Keypoint) {
        self.0[index] = kp;
    }

    pub fn points(&self) -> &[Keypoint; NUM_KEYPOINTS] {
        &self.0
    }

    pub fn visible_count(&self) -> usize {
        self.0.iter().filter(|k| k.visible).count()
    }

    /// Applies `f` to the coordinates of every visible point.
    pub fn map_visible(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> KeypointSet {
        let mut out = *self;
        for kp in out.0.iter_mut().filter(|k| k.visible) {
            let (x, y) = f(kp.x, kp.y);
            kp.x = x;
            kp.y = y;
        }
        out
    }
}

impl Serialize for KeypointSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 3]> = self
            .0
            .iter()
            .map(|k| [k.x, k.y, if k.visible { 1.0 } else { 0.0 }])
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeypointSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<[f64; 3]> = Vec::deserialize(d)?;
        let points: Vec<Keypoint> = rows
            .iter()
            .map(|r| Keypoint {
                x: r[0],
                y: r[1],
                visible: r[2] > 0.0,
            })
            .collect();
        KeypointSet::from_partial(&points).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "{} keypoints listed, at most {NUM_KEYPOINTS} allowed",
                rows.len()
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Unknown,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOfDay {
    Day,
    Night,
}

impl TimeOfDay {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Night => "night",
        }
    }
}

/// Axis-aligned box `(x, y, w, h)` in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && y >= self.y && x <= self.x + self.w && y <= self.y + self.h
    }

    /// Integer pixel window covering the box, clipped to `width x height`.
    pub fn pixel_window(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = ((self.x + self.w).ceil() as usize).min(width).max(x0 + 1);
        let y1 = ((self.y + self.h).ceil() as usize).min(height).max(y0 + 1);
        (x0.min(width - 1), y0.min(height - 1), x1 - x0, y1 - y0)
    }
}

pub(crate) mod time_format {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    const FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

    pub fn parse(s: &str) -> Option<NaiveDateTime> {
        if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
            return Some(t.naive_local());
        }
        ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y:%m:%d %H:%M:%S"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    }

    pub fn serialize<S: Serializer>(t: &Option<NaiveDateTime>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_str(&t.format(FORMAT).to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDateTime>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(s) => parse(&s)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("unparseable capture_time '{s}'"))),
        }
    }
}

/// One annotated camera-trap image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the dataset root unless absolute.
    pub image_path: PathBuf,
    pub cat_id: String,
    pub side: Side,
    pub time_of_day: TimeOfDay,
    #[serde(default, with = "time_format", skip_serializing_if = "Option::is_none")]
    pub capture_time: Option<NaiveDateTime>,
    pub camera_id: String,
    pub bbox: BBox,
    pub keypoints: KeypointSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<u32>,
}

impl ImageRecord {
    /// Stable identifier used in reports and exports.
    pub fn record_id(&self) -> String {
        self.image_path.to_string_lossy().replace('\\', "/")
    }
}

/// Which attributes split one cat into several entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionSetting {
    pub use_side: bool,
    pub use_time: bool,
}

impl Default for PartitionSetting {
    fn default() -> Self {
        PartitionSetting::FULL
    }
}

impl PartitionSetting {
    pub const NONE: PartitionSetting = PartitionSetting {
        use_side: false,
        use_time: false,
    };
    pub const TIME: PartitionSetting = PartitionSetting {
        use_side: false,
        use_time: true,
    };
    pub const SIDE: PartitionSetting = PartitionSetting {
        use_side: true,
        use_time: false,
    };
    pub const FULL: PartitionSetting = PartitionSetting {
        use_side: true,
        use_time: true,
    };

    pub const ALL: [PartitionSetting; 4] = [Self::NONE, Self::TIME, Self::SIDE, Self::FULL];

    pub fn name(&self) -> &'static str {
        match (self.use_side, self.use_time) {
            (false, false) => "none",
            (false, true) => "time",
            (true, false) => "side",
            (true, true) => "side+time",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn entity_of(&self, record: &ImageRecord) -> EntityId {
        let mut id = record.cat_id.clone();
        if self.use_side {
            id.push('/');
            id.push_str(record.side.as_str());
        }
        if self.use_time {
            id.push('/');
            id.push_str(record.time_of_day.as_str());
        }
        EntityId(id)
    }
}

/// Class label: a cat, optionally refined by side and/or time of day.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    /// Parallel to `records`.
    pub entity_of: Vec<EntityId>,
    pub partition: PartitionSetting,
}

impl Dataset {
    /// Builds a dataset and labels it under `partition`.
    pub fn new(
        root: impl Into<PathBuf>,
        records: Vec<ImageRecord>,
        partition: PartitionSetting,
    ) -> crate::Result<Self> {
        let unlabeled = Dataset {
            root: root.into(),
            records,
            entity_of: Vec::new(),
            partition,
        };
        derive_entities(&unlabeled, partition)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        resolve(&self.root, &self.records[index].image_path)
    }

    /// Image files of the records that do not exist on disk.
    pub fn missing_images(&self) -> Vec<PathBuf> {
        (0..self.len()).map(|i| self.image_path(i)).filter(|p| !p.is_file()).collect()
    }

    /// Sorted distinct entities.
    pub fn entities(&self) -> Vec<EntityId> {
        let set: BTreeSet<&EntityId> = self.entity_of.iter().collect();
        set.into_iter().cloned().collect()
    }

    pub fn cats(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().map(|r| &r.cat_id).collect();
        set.into_iter().cloned().collect()
    }

    /// Record indices per entity, entities in sorted order.
    pub fn indices_by_entity(&self) -> BTreeMap<EntityId, Vec<usize>> {
        let mut map: BTreeMap<EntityId, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entity_of.iter().enumerate() {
            map.entry(e.clone()).or_default().push(i);
        }
        map
    }

    /// Entity -> dense class index, in sorted entity order.
    pub fn label_vocabulary(&self) -> BTreeMap<EntityId, usize> {
        self.entities()
            .into_iter()
            .enumerate()
            .map(|(i, e)| (e, i))
            .collect()
    }

    pub(crate) fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            entity_of: indices.iter().map(|&i| self.entity_of[i].clone()).collect(),
            partition: self.partition,
        }
    }

    /// Writes the records as a JSON-lines manifest. Image paths stay relative
    /// when the manifest goes next to the dataset root and are made absolute
    /// otherwise, so the new manifest resolves to the same files.
    pub fn write_manifest(&self, path: &Path) -> crate::Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let same_root = match (dir.canonicalize(), self.root.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        let root = if same_root {
            self.root.clone()
        } else {
            self.root.canonicalize().unwrap_or_else(|_| self.root.clone())
        };
        let mut text = String::new();
        for r in &self.records {
            if same_root {
                text.push_str(&serde_json::to_string(r)?);
            } else {
                let mut moved = r.clone();
                moved.image_path = resolve(&root, &r.image_path);
                text.push_str(&serde_json::to_string(&moved)?);
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
    }
}

pub(crate) fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn record(cat: &str, side: Side, tod: TimeOfDay, n: usize) -> ImageRecord {
        ImageRecord {
            image_path: PathBuf::from(format!(
                "{cat}_{}_{}_{n}.png",
                side.as_str(),
                tod.as_str()
            )),
            cat_id: cat.to_string(),
            side,
            time_of_day: tod,
            capture_time: None,
            camera_id: "cam0".into(),
            bbox: BBox {
                x: 0.0,
                y: 0.0,
                w: 10.0,
                h: 10.0,
            },
            keypoints: KeypointSet::default(),
            image_width: Some(10),
            image_height: Some(10),
        }
    }

    /// Four cats, all with left+right night images, the first also with
    /// left+right day images; `per` images for every combination.
    pub fn table4_records(per: usize) -> Vec<ImageRecord> {
        let mut out = Vec::new();
        for (c, cat) in ["a", "b", "c", "d"].iter().enumerate() {
            for side in [Side::Left, Side::Right] {
                for n in 0..per {
                    out.push(record(cat, side, TimeOfDay::Night, n));
                    if c == 0 {
                        out.push(record(cat, side, TimeOfDay::Day, n));
                    }
                }
            }
        }
        out
    }
}
