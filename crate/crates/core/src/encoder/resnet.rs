//! Residual backbones (18/34 basic blocks, 50/101 bottlenecks), parameter
//! names following the torchvision layout so pretrained safetensors exports
//! load without renaming.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{BatchNorm, VarBuilder};
use serde::{Deserialize, Serialize};

use super::ops;

/// Supported backbone depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BackboneDepth {
    R18,
    R34,
    R50,
    R101,
}

impl BackboneDepth {
    pub const ALL: [BackboneDepth; 4] = [Self::R18, Self::R34, Self::R50, Self::R101];

    pub fn layers(self) -> u32 {
        match self {
            Self::R18 => 18,
            Self::R34 => 34,
            Self::R50 => 50,
            Self::R101 => 101,
        }
    }

    fn blocks(self) -> [usize; 4] {
        match self {
            Self::R18 => [2, 2, 2, 2],
            Self::R34 | Self::R50 => [3, 4, 6, 3],
            Self::R101 => [3, 4, 23, 3],
        }
    }

    fn bottleneck(self) -> bool {
        matches!(self, Self::R50 | Self::R101)
    }

    /// Width of the pooled feature vector fed to the head.
    pub fn feature_dim(self) -> usize {
        if self.bottleneck() {
            2048
        } else {
            512
        }
    }
}

impl TryFrom<u32> for BackboneDepth {
    type Error = String;

    fn try_from(v: u32) -> std::result::Result<Self, String> {
        match v {
            18 => Ok(Self::R18),
            34 => Ok(Self::R34),
            50 => Ok(Self::R50),
            101 => Ok(Self::R101),
            other => Err(format!("unsupported backbone depth {other} (expected 18, 34, 50 or 101)")),
        }
    }
}

impl From<BackboneDepth> for u32 {
    fn from(d: BackboneDepth) -> u32 {
        d.layers()
    }
}

impl std::fmt::Display for BackboneDepth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "resnet{}", self.layers())
    }
}

impl std::str::FromStr for BackboneDepth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let digits = s.trim().trim_start_matches("resnet");
        let n: u32 = digits
            .parse()
            .map_err(|_| format!("cannot parse backbone depth from {s:?}"))?;
        Self::try_from(n)
    }
}

struct ConvBn {
    weight: Tensor,
    bn: BatchNorm,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn new(
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        conv: VarBuilder,
        bn: VarBuilder,
    ) -> Result<Self> {
        let weight = conv.get((c_out, c_in, ksize, ksize), "weight")?;
        let bn = candle_nn::batch_norm(c_out, 1e-5, bn)?;
        Ok(Self {
            weight,
            bn,
            stride,
            padding,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        ops::conv2d(xs, &self.weight, self.padding, self.stride)?.apply_t(&self.bn, train)
    }
}

enum Block {
    Basic {
        conv1: ConvBn,
        conv2: ConvBn,
        downsample: Option<ConvBn>,
    },
    Bottleneck {
        conv1: ConvBn,
        conv2: ConvBn,
        conv3: ConvBn,
        downsample: Option<ConvBn>,
    },
}

fn downsample(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Option<ConvBn>> {
    if stride == 1 && c_in == c_out {
        return Ok(None);
    }
    ConvBn::new(c_in, c_out, 1, stride, 0, vb.pp(0), vb.pp(1)).map(Some)
}

impl Block {
    fn basic(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self::Basic {
            conv1: ConvBn::new(c_in, c_out, 3, stride, 1, vb.pp("conv1"), vb.pp("bn1"))?,
            conv2: ConvBn::new(c_out, c_out, 3, 1, 1, vb.pp("conv2"), vb.pp("bn2"))?,
            downsample: downsample(c_in, c_out, stride, vb.pp("downsample"))?,
        })
    }

    fn bottleneck(c_in: usize, width: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let c_out = 4 * width;
        Ok(Self::Bottleneck {
            conv1: ConvBn::new(c_in, width, 1, 1, 0, vb.pp("conv1"), vb.pp("bn1"))?,
            conv2: ConvBn::new(width, width, 3, stride, 1, vb.pp("conv2"), vb.pp("bn2"))?,
            conv3: ConvBn::new(width, c_out, 1, 1, 0, vb.pp("conv3"), vb.pp("bn3"))?,
            downsample: downsample(c_in, c_out, stride, vb.pp("downsample"))?,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (ys, downsample) = match self {
            Self::Basic {
                conv1,
                conv2,
                downsample,
            } => {
                let ys = conv1.forward_t(xs, train)?.relu()?;
                (conv2.forward_t(&ys, train)?, downsample)
            }
            Self::Bottleneck {
                conv1,
                conv2,
                conv3,
                downsample,
            } => {
                let ys = conv1.forward_t(xs, train)?.relu()?;
                let ys = conv2.forward_t(&ys, train)?.relu()?;
                (conv3.forward_t(&ys, train)?, downsample)
            }
        };
        let shortcut = match downsample {
            Some(d) => d.forward_t(xs, train)?,
            None => xs.clone(),
        };
        (shortcut + ys)?.relu()
    }
}

/// Convolutional trunk up to and including global average pooling.
pub struct Backbone {
    stem: ConvBn,
    blocks: Vec<Block>,
    depth: BackboneDepth,
}

impl Backbone {
    pub fn new(depth: BackboneDepth, vb: VarBuilder) -> Result<Self> {
        let stem = ConvBn::new(3, 64, 7, 2, 3, vb.pp("conv1"), vb.pp("bn1"))?;
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (stage, &count) in depth.blocks().iter().enumerate() {
            let width = 64 << stage;
            let vb_stage = vb.pp(format!("layer{}", stage + 1));
            for index in 0..count {
                let stride = if index == 0 && stage > 0 { 2 } else { 1 };
                let block = if depth.bottleneck() {
                    Block::bottleneck(c_in, width, stride, vb_stage.pp(index))?
                } else {
                    Block::basic(c_in, width, stride, vb_stage.pp(index))?
                };
                c_in = if depth.bottleneck() { 4 * width } else { width };
                blocks.push(block);
            }
        }
        Ok(Self {
            stem,
            blocks,
            depth,
        })
    }

    pub fn depth(&self) -> BackboneDepth {
        self.depth
    }

    /// `(N, 3, H, W)` to `(N, feature_dim)`.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut xs = self.stem.forward_t(xs, train)?.relu()?;
        xs = ops::max_pool_3x3_s2(&xs)?;
        for block in &self.blocks {
            xs = block.forward_t(&xs, train)?;
        }
        xs.mean(D::Minus1)?.mean(D::Minus1)
    }
}

/// Backbone plus the linear embedding head that replaces the classifier.
pub struct EmbeddingNet {
    backbone: Backbone,
    head: candle_nn::Linear,
}

impl EmbeddingNet {
    pub fn new(depth: BackboneDepth, embedding_dim: usize, vb: VarBuilder) -> Result<Self> {
        let backbone = Backbone::new(depth, vb.clone())?;
        let head = candle_nn::linear(depth.feature_dim(), embedding_dim, vb.pp("head"))?;
        Ok(Self { backbone, head })
    }

    pub fn head(&self) -> &candle_nn::Linear {
        &self.head
    }

    pub fn features_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.backbone.forward_t(xs, train)
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.head.forward(&self.backbone.forward_t(xs, train)?)
    }
}
