//! CIFAR-style residual networks used as teacher and student.
//!
//! `resnet<depth>[-w<width>]`: three stages of basic blocks with widths
//! `w, 2w, 4w` and strides `1, 2, 2`; `depth = 6n + 2`. Default width is 16,
//! so `resnet56` and `resnet20` are the usual CIFAR pair.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffkd::{FeatureTap, ModelOutputs};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvOpts, Linear, ParamBuilder, ParamMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub depth: usize,
    pub width: usize,
}

impl ArchSpec {
    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }

    pub fn feature_channels(&self) -> usize {
        4 * self.width
    }
}

impl std::str::FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown architecture `{s}` (expected resnet<6n+2>[-w<width>])"));
        let rest = s.strip_prefix("resnet").ok_or_else(bad)?;
        let (depth, width) = match rest.split_once("-w") {
            Some((d, w)) => (d, w.parse::<usize>().map_err(|_| bad())?),
            None => (rest, 16),
        };
        let depth: usize = depth.parse().map_err(|_| bad())?;
        if depth < 8 || !(depth - 2).is_multiple_of(6) || width == 0 {
            return Err(bad());
        }
        Ok(Self { depth, width })
    }
}

impl std::fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.width == 16 {
            write!(f, "resnet{}", self.depth)
        } else {
            write!(f, "resnet{}-w{}", self.depth, self.width)
        }
    }
}

fn conv3x3(pb: &ParamBuilder, cin: usize, cout: usize, stride: usize) -> Result<Conv2d> {
    Conv2d::kaiming(
        pb,
        cin,
        cout,
        ConvOpts {
            kernel: 3,
            stride,
            padding: 1,
            bias: false,
        },
    )
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            let conv = Conv2d::kaiming(
                &pb.pp("down.conv"),
                cin,
                cout,
                ConvOpts {
                    kernel: 1,
                    stride,
                    padding: 0,
                    bias: false,
                },
            )?;
            Some((conv, BatchNorm2d::new(&pb.pp("down.bn"), cout)?))
        } else {
            None
        };
        Ok(Self {
            conv1: conv3x3(&pb.pp("conv1"), cin, cout, stride)?,
            bn1: BatchNorm2d::new(&pb.pp("bn1"), cout)?,
            conv2: conv3x3(&pb.pp("conv2"), cout, cout, 1)?,
            bn2: BatchNorm2d::new(&pb.pp("bn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let m = ParamMode::Tracked;
        let h = self.bn1.forward(&self.conv1.forward(x, m)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h, m)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x, m)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    arch: ArchSpec,
    classes: usize,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

impl ResNet {
    pub fn new(pb: &ParamBuilder, arch: ArchSpec, in_channels: usize, classes: usize) -> Result<Self> {
        let w = arch.width;
        let n = arch.blocks_per_stage();
        let mut blocks = Vec::with_capacity(3 * n);
        let mut cin = w;
        for (stage, (cout, stride)) in [(w, 1), (2 * w, 2), (4 * w, 2)].into_iter().enumerate() {
            for b in 0..n {
                let s = if b == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(&pb.pp(format!("layer{}.{b}", stage + 1)), cin, cout, s)?);
                cin = cout;
            }
        }
        Ok(Self {
            arch,
            classes,
            stem: conv3x3(&pb.pp("stem"), in_channels, w, 1)?,
            stem_bn: BatchNorm2d::new(&pb.pp("stem_bn"), w)?,
            blocks,
            fc: Linear::new(&pb.pp("fc"), 4 * w, classes)?,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Channel count at a tap point.
    pub fn tap_channels(&self, tap: FeatureTap) -> usize {
        match tap {
            FeatureTap::Backbone => self.arch.feature_channels(),
            FeatureTap::Logits => self.classes,
        }
    }

    /// `train` selects batch statistics (and updates running statistics).
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ModelOutputs> {
        let mut h = self
            .stem_bn
            .forward(&self.stem.forward(images, ParamMode::Tracked)?, train)?
            .relu()?;
        for block in &self.blocks {
            h = block.forward(&h, train)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        let logits = self.fc.forward(&pooled, ParamMode::Tracked)?;
        Ok(ModelOutputs { feature: h, logits })
    }
}
