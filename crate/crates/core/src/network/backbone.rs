//! Residual feature extractors, parameter names compatible with the usual
//! torchvision layout (`conv1`, `bn1`, `layerN.M.*`, `downsample.0/1`) so
//! pretrained weights exported to safetensors load directly.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, conv2d_no_bias, BatchNorm, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Imagenet,
    /// Single 3x3 stride-2 convolution, for small inputs.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub block: BlockKind,
    pub layers: [usize; 4],
    pub base_width: usize,
    pub stem: StemKind,
}

impl BackboneSpec {
    pub const fn resnet(block: BlockKind, layers: [usize; 4]) -> Self {
        BackboneSpec {
            block,
            layers,
            base_width: 64,
            stem: StemKind::Imagenet,
        }
    }

    pub const RESNET18: BackboneSpec = Self::resnet(BlockKind::Basic, [2, 2, 2, 2]);
    pub const RESNET34: BackboneSpec = Self::resnet(BlockKind::Basic, [3, 4, 6, 3]);
    pub const RESNET50: BackboneSpec = Self::resnet(BlockKind::Bottleneck, [3, 4, 6, 3]);
    pub const RESNET101: BackboneSpec = Self::resnet(BlockKind::Bottleneck, [3, 4, 23, 3]);
    pub const RESNET152: BackboneSpec = Self::resnet(BlockKind::Bottleneck, [3, 8, 36, 3]);

    /// Small residual net for CPU experiments.
    pub const fn tiny(base_width: usize) -> Self {
        BackboneSpec {
            block: BlockKind::Basic,
            layers: [1, 1, 1, 1],
            base_width,
            stem: StemKind::Compact,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet18" => Some(Self::RESNET18),
            "resnet34" => Some(Self::RESNET34),
            "resnet50" => Some(Self::RESNET50),
            "resnet101" => Some(Self::RESNET101),
            "resnet152" => Some(Self::RESNET152),
            "tiny" => Some(Self::tiny(16)),
            _ => None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.base_width * 8 * self.block.expansion()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.layers.contains(&0) {
            return Err(Error::Config(
                "backbone needs a positive width and at least one block per stage".into(),
            ));
        }
        Ok(())
    }

    /// Learnable parameters (convolutions and batch-norm affine terms; no
    /// classifier).
    pub fn param_count(&self) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout;
        let bn = |c: usize| 2 * c;
        let w = self.base_width;
        let stem_k = match self.stem {
            StemKind::Imagenet => 7,
            StemKind::Compact => 3,
        };
        let mut total = conv(stem_k, 3, w) + bn(w);
        let mut cin = w;
        for (stage, &blocks) in self.layers.iter().enumerate() {
            let planes = w << stage;
            let cout = planes * self.block.expansion();
            for b in 0..blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                total += match self.block {
                    BlockKind::Basic => conv(3, cin, planes) + bn(planes) + conv(3, planes, planes) + bn(planes),
                    BlockKind::Bottleneck => {
                        conv(1, cin, planes)
                            + bn(planes)
                            + conv(3, planes, planes)
                            + bn(planes)
                            + conv(1, planes, cout)
                            + bn(cout)
                    }
                };
                if stride != 1 || cin != cout {
                    total += conv(1, cin, cout) + bn(cout);
                }
                cin = cout;
            }
        }
        total
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    conv2d_no_bias(cin, cout, k, cfg, vb)
}

/// Strided convolution with odd spatial sizes rounded up to even by zero
/// padding on the bottom and right. The result is unchanged for every
/// kernel used here (k = 2p + 1), and it keeps the input gradient shape
/// consistent in candle, whose backward pass infers the transposed
/// convolution's output padding from the height alone.
fn conv_forward(c: &Conv2d, x: &Tensor) -> candle_core::Result<Tensor> {
    if c.config().stride == 1 {
        return c.forward(x);
    }
    let (_, _, h, w) = x.dims4()?;
    let mut x = x.clone();
    if h % 2 == 1 {
        x = x.pad_with_zeros(2, 0, 1)?;
    }
    if w % 2 == 1 {
        x = x.pad_with_zeros(3, 0, 1)?;
    }
    c.forward(&x)
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm>,
    downsample: Option<Downsample>,
}

impl Block {
    fn new(kind: BlockKind, cin: usize, planes: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let cout = planes * kind.expansion();
        let (convs, bns) = match kind {
            BlockKind::Basic => (
                vec![
                    conv(cin, planes, 3, stride, vb.pp("conv1"))?,
                    conv(planes, planes, 3, 1, vb.pp("conv2"))?,
                ],
                vec![
                    batch_norm(planes, 1e-5, vb.pp("bn1"))?,
                    batch_norm(planes, 1e-5, vb.pp("bn2"))?,
                ],
            ),
            BlockKind::Bottleneck => (
                vec![
                    conv(cin, planes, 1, 1, vb.pp("conv1"))?,
                    conv(planes, planes, 3, stride, vb.pp("conv2"))?,
                    conv(planes, cout, 1, 1, vb.pp("conv3"))?,
                ],
                vec![
                    batch_norm(planes, 1e-5, vb.pp("bn1"))?,
                    batch_norm(planes, 1e-5, vb.pp("bn2"))?,
                    batch_norm(cout, 1e-5, vb.pp("bn3"))?,
                ],
            ),
        };
        let downsample = if stride != 1 || cin != cout {
            Some(Downsample {
                conv: conv(cin, cout, 1, stride, vb.pp("downsample.0"))?,
                bn: batch_norm(cout, 1e-5, vb.pp("downsample.1"))?,
            })
        } else {
            None
        };
        Ok(Block {
            convs,
            bns,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (c, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            h = bn.forward_t(&conv_forward(c, &h)?, train)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let shortcut = match &self.downsample {
            Some(d) => d.bn.forward_t(&conv_forward(&d.conv, x)?, train)?,
            None => x.clone(),
        };
        (h + shortcut)?.relu()
    }
}

/// Residual network ending in global average pooling.
#[derive(Debug, Clone)]
pub struct ResNet {
    spec: BackboneSpec,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
}

impl ResNet {
    pub fn new(spec: BackboneSpec, vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let (k, stride) = match spec.stem {
            StemKind::Imagenet => (7, 2),
            StemKind::Compact => (3, 2),
        };
        let stem = conv(3, w, k, stride, vb.pp("conv1"))?;
        let stem_bn = batch_norm(w, 1e-5, vb.pp("bn1"))?;
        let mut blocks = Vec::new();
        let mut cin = w;
        for (stage, &n) in spec.layers.iter().enumerate() {
            let planes = w << stage;
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(Block::new(
                    spec.block,
                    cin,
                    planes,
                    stride,
                    vb.pp(format!("layer{}.{b}", stage + 1)),
                )?);
                cin = planes * spec.block.expansion();
            }
        }
        Ok(ResNet {
            spec,
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// `[B, 3, H, W] -> [B, feature_dim]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = self.stem_bn.forward_t(&conv_forward(&self.stem, x)?, train)?.relu()?;
        if self.spec.stem == StemKind::Imagenet {
            // replicate padding is exact for max pooling
            h = h.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
            h = h.max_pool2d_with_stride(3, 2)?;
        }
        for b in &self.blocks {
            h = b.forward_t(&h, train)?;
        }
        h.flatten_from(2)?.mean(2)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;
    use crate::network::params::ParamStore;

    #[test]
    fn analytic_counts_match_published_backbones() {
        // feature extractor sizes of the standard residual networks, fc excluded
        assert_eq!(BackboneSpec::RESNET18.param_count(), 11_176_512);
        assert_eq!(BackboneSpec::RESNET34.param_count(), 21_284_672);
        assert_eq!(BackboneSpec::RESNET50.param_count(), 23_508_032);
        assert_eq!(BackboneSpec::RESNET152.param_count(), 58_143_808);
        assert_eq!(BackboneSpec::RESNET152.feature_dim(), 2048);
        assert_eq!(BackboneSpec::RESNET34.feature_dim(), 512);
    }

    #[test]
    fn instantiated_counts_match_analytic() {
        let dev = Device::Cpu;
        for spec in [
            BackboneSpec::tiny(8),
            BackboneSpec {
                block: BlockKind::Bottleneck,
                layers: [1, 2, 1, 1],
                base_width: 4,
                stem: StemKind::Imagenet,
            },
            BackboneSpec::RESNET34,
        ] {
            let store = ParamStore::new(1);
            let _ = ResNet::new(spec, store.var_builder(&dev)).unwrap();
            assert_eq!(store.learnable_count(), spec.param_count(), "{spec:?}");
        }
    }

    #[test]
    fn output_shape() {
        let dev = Device::Cpu;
        let store = ParamStore::new(1);
        let spec = BackboneSpec {
            block: BlockKind::Bottleneck,
            layers: [1, 1, 1, 1],
            base_width: 4,
            stem: StemKind::Imagenet,
        };
        let net = ResNet::new(spec, store.var_builder(&dev)).unwrap();
        let x = Tensor::zeros((2, 3, 40, 24), DType::F32, &dev).unwrap();
        let y = net.forward_t(&x, false).unwrap();
        assert_eq!(y.dims(), &[2, 128]);
    }

    #[test]
    fn strided_conv_padding_is_exact_and_differentiable() {
        let dev = Device::Cpu;
        let store = ParamStore::new(3);
        let vb = store.var_builder(&dev);
        for (k, h, w) in [(3, 6, 11), (1, 11, 6), (7, 9, 12), (3, 7, 7)] {
            let c = conv(2, 3, k, 2, vb.pp(format!("c{k}{h}{w}"))).unwrap();
            let x = candle_core::Var::from_tensor(
                &Tensor::randn(0f32, 1.0, (1, 2, h, w), &dev).unwrap(),
            )
            .unwrap();
            let plain = c.forward(x.as_tensor()).unwrap();
            let padded = conv_forward(&c, x.as_tensor()).unwrap();
            let diff = (plain - &padded).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
            let grads = padded.sum_all().unwrap().backward().unwrap();
            assert_eq!(grads.get(x.as_tensor()).unwrap().dims(), &[1, 2, h, w]);
        }
    }
}
