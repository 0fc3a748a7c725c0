use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PartitionSetting, Side};
use crate::error::{Error, Result};

/// Relabels every record under `setting`. Entities exist only for observed
/// (cat, side, time) combinations.
pub fn derive_entities(dataset: &Dataset, setting: PartitionSetting) -> Result<Dataset> {
    if let Some(r) = dataset.records.iter().find(|r| r.side == Side::Unknown) {
        return Err(Error::Validation(format!(
            "record '{}' has unknown side; front/back views cannot be labelled",
            r.record_id()
        )));
    }
    Ok(Dataset {
        root: dataset.root.clone(),
        records: dataset.records.clone(),
        entity_of: dataset.records.iter().map(|r| setting.entity_of(r)).collect(),
        partition: setting,
    })
}

/// Cat-level split: every image of a cat lands on the same side.
/// `round(ratio * cats)` cats go to training.
pub fn split_train_test(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut cats = dataset.cats();
    if cats.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 cats to split, found {}",
            cats.len()
        )));
    }
    let n_train = (ratio * cats.len() as f64).round() as usize;
    if n_train == 0 || n_train == cats.len() {
        return Err(Error::Validation(format!(
            "ratio {ratio} over {} cats leaves one side empty",
            cats.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cats.shuffle(&mut rng);
    let train_cats: BTreeSet<&String> = cats[..n_train].iter().collect();

    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| train_cats.contains(&dataset.records[i].cat_id));
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

/// Drops every image captured within `seconds` of the preceding image of the
/// same camera and cat (bursts collapse onto their first frame). Records
/// without a capture time are kept.
pub fn dedup_sequences(dataset: &Dataset, seconds: f64) -> Dataset {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if r.capture_time.is_some() {
            groups
                .entry((r.camera_id.as_str(), r.cat_id.as_str()))
                .or_default()
                .push(i);
        }
    }
    let mut dropped = BTreeSet::new();
    for mut members in groups.into_values() {
        members.sort_by_key(|&i| (dataset.records[i].capture_time, i));
        for pair in members.windows(2) {
            let (a, b) = (
                dataset.records[pair[0]].capture_time.unwrap(),
                dataset.records[pair[1]].capture_time.unwrap(),
            );
            let gap = (b - a).num_milliseconds() as f64 / 1000.0;
            if gap <= seconds {
                dropped.insert(pair[1]);
            }
        }
    }
    let keep: Vec<usize> = (0..dataset.len()).filter(|i| !dropped.contains(i)).collect();
    dataset.subset(&keep)
}
