//! Training configuration and the optimization loop.

mod batch;
mod optim;
mod sampler;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::Device;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use batch::{crop_to_box, prepare_sample, preview_parts};
pub use optim::{Schedule, Sgd};
pub use sampler::{pk_sample, PkBatch, PkSampler};

use crate::augment::{AugmentConfig, Augmenter};
use crate::data::{Dataset, KeypointSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::PartConfig;
use crate::losses::{term_names, total_loss_for, LossConfig};
use crate::network::checkpoint::{self, load_backbone_weights};
use crate::network::{ParamStore, PpgNetCat, StreamConfig, TrainBatch};
use crate::raster::{Raster, CHANNELS};

/// Local safetensors files with backbone weights; nothing is downloaded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainedConfig {
    pub full: Option<PathBuf>,
    /// Loaded into the trunk and every limb backbone.
    pub partial: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Entities per batch.
    pub p: usize,
    /// Images per entity in a batch.
    pub k: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Validate every this many epochs when a validation set is given.
    pub validate_every: usize,
    /// Keep decoded box crops in memory between epochs.
    pub cache_images: bool,
    pub pretrained: PretrainedConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub stream: StreamConfig,
    pub parts: PartConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            p: 4,
            k: 4,
            learning_rate: 3.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::default(),
            seed: 0,
            validate_every: 1,
            cache_images: false,
            pretrained: PretrainedConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            stream: StreamConfig::default(),
            parts: PartConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("P and K must both be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "need learning_rate > 0, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.parts.validate()?;
        self.stream.validate()
    }
}

pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Training checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
    /// Record ids that must never reach a batch, e.g. the test split.
    pub excluded_ids: BTreeSet<String>,
    pub validation: Option<Dataset>,
    pub device: Device,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            out_dir: out_dir.into(),
            resume: None,
            stop_after_epochs: None,
            excluded_ids: BTreeSet::new(),
            validation: None,
            device: Device::Cpu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Training checkpoint after the last completed epoch.
    pub checkpoint: PathBuf,
    /// Full-stream checkpoint; written once every epoch is done.
    pub inference_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics: PathBuf,
    pub epochs_completed: usize,
    pub steps: usize,
    pub labels: Vec<String>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const INFERENCE_FILE: &str = "inference.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    epochs_completed: usize,
    global_step: usize,
    best_map: Option<f64>,
    seed: u64,
}

/// Mixes several integers into one seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

pub fn metrics_header() -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "step".to_string()];
    h.extend(term_names());
    h.push("total".into());
    h.push("lr".into());
    h
}

/// Reads crops lazily or from memory.
struct CropSource<'a> {
    dataset: &'a Dataset,
    cache: Option<Vec<(Raster, KeypointSet)>>,
}

impl<'a> CropSource<'a> {
    fn new(dataset: &'a Dataset, cache: bool) -> Result<Self> {
        let cache = if cache {
            Some(
                (0..dataset.len())
                    .into_par_iter()
                    .map(|i| Self::load(dataset, i))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(CropSource { dataset, cache })
    }

    fn load(dataset: &Dataset, i: usize) -> Result<(Raster, KeypointSet)> {
        let image = Raster::load(&dataset.image_path(i))?;
        crop_to_box(&image, &dataset.records[i])
    }

    fn get(&self, i: usize) -> Result<std::borrow::Cow<'_, (Raster, KeypointSet)>> {
        match &self.cache {
            Some(c) => Ok(std::borrow::Cow::Borrowed(&c[i])),
            None => Ok(std::borrow::Cow::Owned(Self::load(self.dataset, i)?)),
        }
    }

    fn channel_mean(&self) -> Result<[f32; CHANNELS]> {
        let n = self.dataset.len().min(256);
        let mut sum = [0f64; CHANNELS];
        for i in 0..n {
            let m = self.get(i)?.0.channel_means();
            for c in 0..CHANNELS {
                sum[c] += m[c] as f64;
            }
        }
        Ok(sum.map(|s| (s / n.max(1) as f64) as f32))
    }
}

/// Keeps the rows of earlier epochs when resuming, so the log matches an
/// uninterrupted run.
fn open_log(path: &Path, header: &[String], keep_through_epoch: Option<usize>) -> Result<csv::Writer<std::fs::File>> {
    let mut kept: Vec<csv::StringRecord> = Vec::new();
    if let (Some(limit), true) = (keep_through_epoch, path.exists()) {
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let epoch: usize = rec.get(0).and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
            if epoch <= limit {
                kept.push(rec);
            }
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for rec in kept {
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

fn load_pretrained(store: &ParamStore, cfg: &TrainConfig, device: &Device) -> Result<()> {
    if let Some(path) = &cfg.pretrained.full {
        let n = load_backbone_weights(store, path, "full.backbone", cfg.stream.full_backbone, device)?;
        log::info!("loaded {n} full-stream backbone tensors from {}", path.display());
    }
    if let Some(path) = &cfg.pretrained.partial {
        let mut prefixes = vec!["trunk.backbone".to_string()];
        if cfg.stream.share_limb_backbone {
            prefixes.push("limbs.backbone".into());
        } else {
            prefixes.extend(
                crate::geometry::PartKind::LIMB_STREAM
                    .iter()
                    .map(|p| format!("limbs.{}.backbone", p.name())),
            );
        }
        for prefix in prefixes {
            load_backbone_weights(store, path, &prefix, cfg.stream.partial_backbone, device)?;
        }
        log::info!("loaded partial backbone weights from {}", path.display());
    }
    Ok(())
}

/// Trains on `train_set`, writing checkpoints and the metrics log under
/// `options.out_dir`.
pub fn train(config: &TrainConfig, train_set: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let out = &options.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let device = &options.device;

    let vocab = train_set.label_vocabulary();
    let labels: Vec<String> = vocab.keys().map(|e| e.to_string()).collect();
    let record_labels: Vec<u32> = train_set.entity_of.iter().map(|e| vocab[e] as u32).collect();
    let mut stream = config.stream.clone();
    if stream.num_entities != labels.len() {
        log::info!(
            "classifier size set to {} training entities (config said {})",
            labels.len(),
            stream.num_entities
        );
        stream.num_entities = labels.len();
    }

    let (model, optim_state, mut state) = match &options.resume {
        Some(path) => {
            let loaded = checkpoint::load_training(path, device)?;
            if loaded.meta.labels != labels || loaded.meta.stream_config != stream {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different label set or stream config",
                    path.display()
                )));
            }
            let state: TrainerState = loaded
                .meta
                .trainer_state
                .map(serde_json::from_value)
                .transpose()?
                .ok_or_else(|| Error::Checkpoint("training checkpoint lacks trainer state".into()))?;
            if state.seed != config.seed {
                return Err(Error::Checkpoint("resume seed differs from the checkpoint's".into()));
            }
            (loaded.model, loaded.optimizer, state)
        }
        None => {
            let store = ParamStore::new(config.seed);
            load_pretrained(&store, config, device)?;
            let model = PpgNetCat::from_store(stream.clone(), store, device)?;
            let state = TrainerState {
                seed: config.seed,
                ..TrainerState::default()
            };
            (model, BTreeMap::new(), state)
        }
    };

    let mut opt = Sgd::new(model.store().learnable(), config.momentum, config.weight_decay);
    opt.load_state(optim_state)?;
    let sampler = PkSampler::new(train_set, config.p, config.k)?;
    let crops = CropSource::new(train_set, config.cache_images)?;
    let mut aug_cfg = config.augment.clone();
    if aug_cfg.fill.is_none() {
        aug_cfg.fill = Some(crops.channel_mean()?);
    }
    let augmenter = Augmenter::new(aug_cfg)?;

    let metrics_path = out.join(METRICS_FILE);
    let keep = options.resume.as_ref().map(|_| state.epochs_completed);
    let mut metrics = open_log(&metrics_path, &metrics_header(), keep)?;
    let validation_path = out.join(VALIDATION_FILE);
    let mut validation_log = match &options.validation {
        Some(_) => Some(open_log(&validation_path, &["epoch".into(), "map".into(), "rank1".into()], keep)?),
        None => None,
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut best_checkpoint = None;

    let stop = options
        .stop_after_epochs
        .unwrap_or(config.epochs)
        .min(config.epochs);
    for epoch in state.epochs_completed..stop {
        let lr = config.schedule.lr(config.learning_rate, epoch, config.epochs);
        let batches = sampler.epoch(config.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            if let Some(i) = batch
                .indices
                .iter()
                .find(|&&i| options.excluded_ids.contains(&train_set.records[i].record_id()))
            {
                return Err(Error::Validation(format!(
                    "excluded record {} reached a training batch",
                    train_set.records[*i].record_id()
                )));
            }
            let samples = batch
                .indices
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let seed = derive_seed(&[config.seed, epoch as u64, b as u64, slot as u64]);
                    let crop = crops.get(i)?;
                    prepare_sample(&crop.0, &crop.1, Some((&augmenter, seed)), &config.parts, &stream)
                })
                .collect::<Result<Vec<_>>>()?;
            let tb = TrainBatch::from_samples(&samples, &stream, device)?;
            let batch_labels: Vec<u32> = batch.indices.iter().map(|&i| record_labels[i]).collect();
            let outputs = model.forward(&tb, true)?;
            let loss = total_loss_for(&outputs, |h| model.classifier(h).clone(), &batch_labels, &config.loss)?;
            let total = loss.total_value()?;
            if !total.is_finite() || loss.terms.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: state.global_step + 1,
                    records: batch.indices.iter().map(|&i| train_set.records[i].record_id()).collect(),
                });
            }
            let grads = loss.total.backward()?;
            opt.step(&grads, lr)?;
            state.global_step += 1;
            epoch_loss += total;

            let mut row = vec![(epoch + 1).to_string(), state.global_step.to_string()];
            row.extend(term_names().iter().map(|n| loss.terms[n].to_string()));
            row.push(total.to_string());
            row.push(lr.to_string());
            metrics.write_record(&row)?;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epochs_completed = epoch + 1;
        log::info!(
            "epoch {}/{}: mean loss {:.4}, lr {lr}",
            epoch + 1,
            config.epochs,
            epoch_loss / batches.len().max(1) as f64
        );

        if let Some(val) = &options.validation {
            if (epoch + 1) % config.validate_every == 0 {
                let inf = model.inference_model()?;
                let report = eval::evaluate(&inf, val, "validation")?;
                log::info!("epoch {}: validation mAP {:.4}, rank-1 {:.4}", epoch + 1, report.map, report.rank1);
                if let Some(w) = validation_log.as_mut() {
                    w.write_record([(epoch + 1).to_string(), report.map.to_string(), report.rank1.to_string()])?;
                    w.flush().map_err(|e| Error::io(&validation_path, e))?;
                }
                if state.best_map.is_none_or(|b| report.map > b) {
                    state.best_map = Some(report.map);
                    let path = out.join(BEST_FILE);
                    checkpoint::save_inference(&path, &inf, &labels)?;
                    best_checkpoint = Some(path);
                }
            }
        }
        checkpoint::save_training(&ckpt_path, &model, opt.state(), &labels, serde_json::to_value(&state)?)?;
    }

    if !ckpt_path.exists() {
        // resumed at or past the stop point without running an epoch
        checkpoint::save_training(&ckpt_path, &model, opt.state(), &labels, serde_json::to_value(&state)?)?;
    }
    let inference_checkpoint = if state.epochs_completed == config.epochs {
        let path = out.join(INFERENCE_FILE);
        checkpoint::save_inference(&path, &model.inference_model()?, &labels)?;
        Some(path)
    } else {
        None
    };
    if best_checkpoint.is_none() && out.join(BEST_FILE).exists() && options.resume.is_some() {
        best_checkpoint = Some(out.join(BEST_FILE));
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        inference_checkpoint,
        best_checkpoint,
        metrics: metrics_path,
        epochs_completed: state.epochs_completed,
        steps: state.global_step,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml("p = 1").is_err());
        assert!(TrainConfig::from_toml("bogus = 3").is_err());
    }

    #[test]
    fn seeds_differ_per_part() {
        let a = derive_seed(&[1, 2, 3]);
        assert_eq!(a, derive_seed(&[1, 2, 3]));
        assert_ne!(a, derive_seed(&[1, 3, 2]));
        assert_ne!(a, derive_seed(&[1, 2, 4]));
    }

    #[test]
    fn header_columns() {
        let h = metrics_header();
        assert_eq!(h.len(), 10);
        assert_eq!(h[2], "d_full.id");
        assert_eq!(h[9], "lr");
    }
}
