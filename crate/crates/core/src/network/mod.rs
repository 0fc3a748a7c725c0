//! The multi-stream part-pose guided embedding network.
//!
//! Three streams run during training: the full-image stream (`d_full`), the
//! trunk stream (`d_trunk`) and the limb stream, which concatenates four limb
//! blocks and two tail blocks into `d_limbs`. The fused embeddings are
//! `z_ft = d_full + d_trunk` and `z_fl = d_full + d_limbs`. Parts without a
//! valid crop contribute exact zeros. Inference keeps only the full stream.

mod backbone;
pub mod checkpoint;
pub mod params;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneSpec, BlockKind, ResNet, StemKind};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::geometry::{PartImage, PartKind};
use crate::raster::{Raster, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub full_backbone: BackboneSpec,
    pub partial_backbone: BackboneSpec,
    pub embed_dim: usize,
    pub limb_embed_dim: usize,
    pub tail_embed_dim: usize,
    pub num_entities: usize,
    /// One backbone for all limb and tail crops, with per-part projections.
    pub share_limb_backbone: bool,
    /// `[width, height]` of the resized full image.
    pub full_input: [usize; 2],
    pub trunk_input: [usize; 2],
    pub limb_input: [usize; 2],
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            full_backbone: BackboneSpec::RESNET152,
            partial_backbone: BackboneSpec::RESNET34,
            embed_dim: 2560,
            limb_embed_dim: 512,
            tail_embed_dim: 256,
            num_entities: 20,
            share_limb_backbone: false,
            full_input: [256, 256],
            trunk_input: [192, 96],
            limb_input: [96, 96],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    Training,
    Inference,
}

impl StreamConfig {
    /// Small variant for CPU training on synthetic data.
    pub fn cpu_small(num_entities: usize) -> Self {
        StreamConfig {
            full_backbone: BackboneSpec::tiny(16),
            partial_backbone: BackboneSpec::tiny(8),
            embed_dim: 384,
            limb_embed_dim: 64,
            tail_embed_dim: 64,
            num_entities,
            share_limb_backbone: true,
            full_input: [96, 48],
            trunk_input: [48, 24],
            limb_input: [16, 32],
        }
        .with_blocks(64)
    }

    /// Sets the limb block size, the tail block at half of it and the
    /// embedding width to match.
    pub fn with_blocks(mut self, limb_embed_dim: usize) -> Self {
        self.limb_embed_dim = limb_embed_dim;
        self.tail_embed_dim = limb_embed_dim / 2;
        self.embed_dim = 4 * limb_embed_dim + 2 * self.tail_embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.full_backbone.validate()?;
        self.partial_backbone.validate()?;
        if 4 * self.limb_embed_dim + 2 * self.tail_embed_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "4 x limb ({}) + 2 x tail ({}) must equal embed_dim ({})",
                self.limb_embed_dim, self.tail_embed_dim, self.embed_dim
            )));
        }
        if self.tail_embed_dim * 2 != self.limb_embed_dim || self.tail_embed_dim == 0 {
            return Err(Error::Config("tail blocks must be half the limb block size".into()));
        }
        if self.num_entities == 0 {
            return Err(Error::Config("num_entities must be positive".into()));
        }
        for (name, spec, size) in [
            ("full_input", &self.full_backbone, self.full_input),
            ("trunk_input", &self.partial_backbone, self.trunk_input),
            ("limb_input", &self.partial_backbone, self.limb_input),
        ] {
            let (h, w) = spec.output_size(size[1], size[0]);
            if size.contains(&0) || h * w < 2 {
                return Err(Error::Config(format!(
                    "{name} {:?} leaves fewer than 2 feature positions after the backbone",
                    size
                )));
            }
        }
        Ok(())
    }

    /// Exact learnable-parameter count of the model in `mode`.
    pub fn param_count(&self, mode: ModelMode) -> usize {
        let proj = |i: usize, o: usize| i * o + o + 2 * o;
        let full = self.full_backbone.param_count()
            + proj(self.full_backbone.feature_dim(), self.embed_dim);
        if mode == ModelMode::Inference {
            return full;
        }
        let pf = self.partial_backbone.feature_dim();
        let pb = self.partial_backbone.param_count();
        let limb_backbones = if self.share_limb_backbone { 1 } else { 6 };
        full + pb
            + proj(pf, self.embed_dim)
            + limb_backbones * pb
            + 4 * proj(pf, self.limb_embed_dim)
            + 2 * proj(pf, self.tail_embed_dim)
            + 3 * self.embed_dim * self.num_entities
    }

    pub fn part_input(&self, part: PartKind) -> [usize; 2] {
        if part == PartKind::Trunk {
            self.trunk_input
        } else {
            self.limb_input
        }
    }

    pub fn part_dim(&self, part: PartKind) -> usize {
        match part {
            PartKind::Trunk => self.embed_dim,
            p if p.is_tail() => self.tail_embed_dim,
            _ => self.limb_embed_dim,
        }
    }
}

impl BackboneSpec {
    /// Spatial `(height, width)` of the last feature map.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let down = |n: usize| if n == 0 { 0 } else { (n - 1) / 2 + 1 };
        let mut hw = (down(h), down(w));
        if self.stem == StemKind::Imagenet {
            hw = (down(hw.0), down(hw.1));
        }
        for _ in 0..3 {
            hw = (down(hw.0), down(hw.1));
        }
        hw
    }
}

/// Embedding heads passed to the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    DFull,
    ZFt,
    ZFl,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::DFull, Head::ZFt, Head::ZFl];

    pub fn name(self) -> &'static str {
        match self {
            Head::DFull => "d_full",
            Head::ZFt => "z_ft",
            Head::ZFl => "z_fl",
        }
    }
}

const IMAGENET_MEAN: [f32; CHANNELS] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; CHANNELS] = [0.229, 0.224, 0.225];

/// Stacks rasters into a normalized `[N, 3, H, W]` tensor; every raster must
/// be exactly `size` (`[width, height]`).
pub fn images_to_tensor(images: &[&Raster], size: [usize; 2], device: &Device) -> Result<Tensor> {
    let [w, h] = size;
    let mut data = Vec::with_capacity(images.len() * CHANNELS * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::Validation(format!(
                "image is {}x{}, model expects {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        for (c, plane) in img.data().chunks(w * h).enumerate() {
            data.extend(plane.iter().map(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), CHANNELS, h, w), device)?)
}

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
struct Projection {
    linear: Linear,
    norm: LayerNorm,
}

impl Projection {
    fn new(input: usize, output: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Projection {
            linear: linear(input, output, vb.pp("linear"))?,
            norm: LayerNorm::new(output, vb.pp("norm"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.norm.forward(&self.linear.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct FullStream {
    backbone: ResNet,
    proj: Projection,
}

impl FullStream {
    fn new(config: &StreamConfig, vb: VarBuilder) -> Result<Self> {
        Ok(FullStream {
            backbone: ResNet::new(config.full_backbone, vb.pp("backbone"))?,
            proj: Projection::new(
                config.full_backbone.feature_dim(),
                config.embed_dim,
                vb.pp("proj"),
            )?,
        })
    }

    fn forward(&self, images: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.proj.forward(&self.backbone.forward_t(images, train)?)
    }
}

/// Part images of one kind for a batch: only valid crops are present.
#[derive(Debug, Clone)]
pub struct PartInput {
    /// `[V, 3, h, w]` where `V` is the number of `true` entries in `valid`.
    pub images: Option<Tensor>,
    pub valid: Vec<bool>,
}

/// Inputs of one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub full: Tensor,
    /// Indexed like [`PartKind::ALL`].
    pub parts: Vec<PartInput>,
}

/// Pre-extracted images of one sample.
#[derive(Debug, Clone)]
pub struct SampleImages {
    pub full: Raster,
    /// Indexed like [`PartKind::ALL`].
    pub parts: [PartImage; 7],
}

impl TrainBatch {
    pub fn from_samples(samples: &[SampleImages], config: &StreamConfig, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training batch has no samples".into()));
        }
        let fulls: Vec<&Raster> = samples.iter().map(|s| &s.full).collect();
        let full = images_to_tensor(&fulls, config.full_input, device)?;
        let parts = PartKind::ALL
            .iter()
            .map(|&part| {
                let rasters: Vec<&Raster> = samples
                    .iter()
                    .filter_map(|s| s.parts[part.index()].raster())
                    .collect();
                let valid = samples.iter().map(|s| s.parts[part.index()].is_valid()).collect();
                let images = if rasters.is_empty() {
                    None
                } else {
                    Some(images_to_tensor(&rasters, config.part_input(part), device)?)
                };
                Ok(PartInput { images, valid })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainBatch { full, parts })
    }

    pub fn batch_size(&self) -> usize {
        self.full.dims()[0]
    }

    fn check(&self, config: &StreamConfig) -> Result<()> {
        let b = self.batch_size();
        let expect = |t: &Tensor, n: usize, size: [usize; 2], what: &str| -> Result<()> {
            let want = [n, CHANNELS, size[1], size[0]];
            if t.dims() != want {
                return Err(Error::Validation(format!(
                    "{what} tensor has shape {:?}, expected {:?}",
                    t.dims(),
                    want
                )));
            }
            Ok(())
        };
        expect(&self.full, b, config.full_input, "full image")?;
        if self.parts.len() != PartKind::ALL.len() {
            return Err(Error::Validation("batch must carry all seven part inputs".into()));
        }
        for (part, input) in PartKind::ALL.iter().zip(&self.parts) {
            let n_valid = input.valid.iter().filter(|v| **v).count();
            if input.valid.len() != b {
                return Err(Error::Validation(format!("{} validity has wrong length", part.name())));
            }
            match &input.images {
                Some(t) => expect(t, n_valid, config.part_input(*part), part.name())?,
                None if n_valid > 0 => {
                    return Err(Error::Validation(format!("{} images missing", part.name())))
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Batched embeddings of one forward pass, each `[B, E]`.
#[derive(Debug, Clone)]
pub struct StreamOutputs {
    pub d_full: Tensor,
    pub d_trunk: Tensor,
    pub d_limbs: Tensor,
    pub z_ft: Tensor,
    pub z_fl: Tensor,
    /// Per sample, indexed like [`PartKind::ALL`].
    pub validity: Vec<[bool; 7]>,
}

impl StreamOutputs {
    pub fn head(&self, head: Head) -> &Tensor {
        match head {
            Head::DFull => &self.d_full,
            Head::ZFt => &self.z_ft,
            Head::ZFl => &self.z_fl,
        }
    }

    pub fn to_sets(&self) -> Result<Vec<EmbeddingSet>> {
        let rows = |t: &Tensor| -> Result<Vec<Vec<f32>>> { Ok(t.to_dtype(DType::F32)?.to_vec2()?) };
        let (f, t, l, zt, zl) = (
            rows(&self.d_full)?,
            rows(&self.d_trunk)?,
            rows(&self.d_limbs)?,
            rows(&self.z_ft)?,
            rows(&self.z_fl)?,
        );
        Ok((0..f.len())
            .map(|i| EmbeddingSet {
                d_full: f[i].clone(),
                d_trunk: t[i].clone(),
                d_limbs: l[i].clone(),
                z_ft: zt[i].clone(),
                z_fl: zl[i].clone(),
                part_validity: PartKind::ALL
                    .iter()
                    .map(|p| (*p, self.validity[i][p.index()]))
                    .collect(),
            })
            .collect())
    }
}

/// Embeddings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub d_full: Vec<f32>,
    pub d_trunk: Vec<f32>,
    pub d_limbs: Vec<f32>,
    pub z_ft: Vec<f32>,
    pub z_fl: Vec<f32>,
    pub part_validity: BTreeMap<PartKind, bool>,
}

/// Backbone plus one projection per part; the backbone may be shared.
#[derive(Debug, Clone)]
struct PartBranch {
    backbone: usize,
    proj: Projection,
    dim: usize,
}

/// Full training model.
pub struct PpgNetCat {
    config: StreamConfig,
    store: ParamStore,
    device: Device,
    full: FullStream,
    backbones: Vec<ResNet>,
    /// Indexed like [`PartKind::ALL`].
    branches: Vec<PartBranch>,
    classifiers: Vec<Tensor>,
}

impl PpgNetCat {
    pub fn new(config: StreamConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::from_store(config, ParamStore::new(seed), device)
    }

    /// Builds on an existing store, reusing any variables already present.
    pub fn from_store(config: StreamConfig, store: ParamStore, device: &Device) -> Result<Self> {
        config.validate()?;
        let vb = store.var_builder(device);
        let full = FullStream::new(&config, vb.pp("full"))?;
        let pf = config.partial_backbone.feature_dim();

        let mut backbones = vec![ResNet::new(config.partial_backbone, vb.pp("trunk.backbone"))?];
        let mut branches = vec![PartBranch {
            backbone: 0,
            proj: Projection::new(pf, config.embed_dim, vb.pp("trunk.proj"))?,
            dim: config.embed_dim,
        }];
        if config.share_limb_backbone {
            backbones.push(ResNet::new(config.partial_backbone, vb.pp("limbs.backbone"))?);
        }
        for part in PartKind::LIMB_STREAM {
            let pvb = vb.pp(format!("limbs.{}", part.name()));
            let backbone = if config.share_limb_backbone {
                1
            } else {
                backbones.push(ResNet::new(config.partial_backbone, pvb.pp("backbone"))?);
                backbones.len() - 1
            };
            let dim = config.part_dim(part);
            branches.push(PartBranch {
                backbone,
                proj: Projection::new(pf, dim, pvb.pp("proj"))?,
                dim,
            });
        }
        let classifiers = Head::ALL
            .iter()
            .map(|h| {
                linear_no_bias(
                    config.embed_dim,
                    config.num_entities,
                    vb.pp(format!("heads.{}", h.name())),
                )
                .map(|l| l.weight().clone())
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(PpgNetCat {
            config,
            store,
            device: device.clone(),
            full,
            backbones,
            branches,
            classifiers,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Class weights `[C, E]` for `head`.
    pub fn classifier(&self, head: Head) -> &Tensor {
        &self.classifiers[head as usize]
    }

    pub fn param_count(&self, mode: ModelMode) -> usize {
        self.store
            .learnable()
            .iter()
            .filter(|(n, _)| mode == ModelMode::Training || n.starts_with("full."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Inference model sharing this model's full-stream weights.
    pub fn inference_model(&self) -> Result<InferenceModel> {
        InferenceModel::from_store(self.config.clone(), self.store.clone(), &self.device)
    }

    fn part_embedding(&self, part: PartKind, input: &PartInput, train: bool) -> Result<Tensor> {
        let branch = &self.branches[part.index()];
        let b = input.valid.len();
        let Some(images) = &input.images else {
            return Ok(Tensor::zeros((b, branch.dim), DType::F32, &self.device)?);
        };
        let feats = self.backbones[branch.backbone].forward_t(images, train)?;
        let emb = branch.proj.forward(&feats)?;
        let zero_row = Tensor::zeros((1, branch.dim), DType::F32, &self.device)?;
        let mut rows = Vec::with_capacity(b);
        let mut k = 0;
        for &v in &input.valid {
            if v {
                rows.push(emb.narrow(0, k, 1)?);
                k += 1;
            } else {
                rows.push(zero_row.clone());
            }
        }
        let mask: Vec<f32> = input.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, (b, 1), &self.device)?;
        Ok(Tensor::cat(&rows, 0)?.broadcast_mul(&mask)?)
    }

    /// Forward pass of all streams. `train` selects batch statistics in the
    /// normalization layers.
    pub fn forward(&self, batch: &TrainBatch, train: bool) -> Result<StreamOutputs> {
        batch.check(&self.config)?;
        let d_full = self.full.forward(&batch.full, train)?;
        let d_trunk = self.part_embedding(PartKind::Trunk, &batch.parts[0], train)?;
        let limb_blocks = PartKind::LIMB_STREAM
            .iter()
            .map(|&p| self.part_embedding(p, &batch.parts[p.index()], train))
            .collect::<Result<Vec<_>>>()?;
        let d_limbs = Tensor::cat(&limb_blocks, 1)?;
        let z_ft = (&d_full + &d_trunk)?;
        let z_fl = (&d_full + &d_limbs)?;
        let validity = (0..batch.batch_size())
            .map(|i| {
                let mut v = [false; 7];
                for (j, input) in batch.parts.iter().enumerate() {
                    v[j] = input.valid[i];
                }
                v
            })
            .collect();
        Ok(StreamOutputs {
            d_full,
            d_trunk,
            d_limbs,
            z_ft,
            z_fl,
            validity,
        })
    }
}

/// Full stream only, for deployment.
pub struct InferenceModel {
    config: StreamConfig,
    store: ParamStore,
    device: Device,
    full: FullStream,
}

impl InferenceModel {
    pub fn from_store(config: StreamConfig, store: ParamStore, device: &Device) -> Result<Self> {
        config.validate()?;
        let full = FullStream::new(&config, store.var_builder(device).pp("full"))?;
        Ok(InferenceModel {
            config,
            store,
            device: device.clone(),
            full,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param_count(&self) -> usize {
        self.store
            .learnable()
            .iter()
            .filter(|(n, _)| n.starts_with("full."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// `[B, 3, H, W] -> [B, E]`, evaluation-mode normalization.
    pub fn forward_infer(&self, images: &Tensor) -> Result<Tensor> {
        let [w, h] = self.config.full_input;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != CHANNELS || dims[2] != h || dims[3] != w {
            return Err(Error::Validation(format!(
                "input has shape {dims:?}, expected [B, 3, {h}, {w}]"
            )));
        }
        Ok(self.full.forward(images, false)?)
    }

    /// Embeds already-resized images in batches of `batch_size`, preserving order.
    pub fn embed(&self, images: &[Raster], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let refs: Vec<&Raster> = chunk.iter().collect();
            let t = images_to_tensor(&refs, self.config.full_input, &self.device)?;
            out.extend(self.forward_infer(&t)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }
}
