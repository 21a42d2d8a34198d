//! Small convolutional pyramid encoder producing features at strides 4, 8, 16, 32.

use crate::error::{Error, Result, ResultExt};
use crate::layers::{conv_macs, conv_params, BatchNorm2d, Conv2d};
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

/// Encoder outputs, finest first.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<[ConvBnRelu; 2]>,
    in_channels: usize,
}

/// Spatial extents must be divisible by the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

impl Encoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_channels: usize, channels: [usize; 4]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = in_channels;
        for (s, &c) in channels.iter().enumerate() {
            let layer = |ps: &mut ParamStore<T>, j: usize, cin: usize, stride: usize| -> Result<ConvBnRelu> {
                let base = format!("{name}.stage{}", s + 1);
                Ok(ConvBnRelu {
                    conv: Conv2d::new(ps, &format!("{base}.conv{j}"), cin, c, 3, ConvSpec::same(1, 1).with_stride(stride), false)?,
                    bn: BatchNorm2d::new(ps, &format!("{base}.bn{j}"), c)?,
                })
            };
            // stage 1 halves twice (stride 4 overall); later stages halve once.
            let second_stride = if s == 0 { 2 } else { 1 };
            stages.push([layer(ps, 0, cin, 2)?, layer(ps, 1, c, second_stride)?]);
            cin = c;
        }
        Ok(Self { stages, in_channels })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = g.value(image).dims4("encoder")?;
        if c != self.in_channels {
            return Err(Error::shape("encoder", "channels", format!("expected {}, got {c}", self.in_channels)));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::shape(
                "encoder",
                "spatial",
                format!("input {h}x{w} must be a multiple of {INPUT_MULTIPLE} in both axes"),
            ));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            for (j, l) in stage.iter().enumerate() {
                let path = format!("stage{}.layer{j}", s + 1);
                x = l.conv.forward(g, ps, x).within(&path)?;
                x = l.bn.forward(g, ps, x).within(&path)?;
                x = g.relu(x);
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().flatten().map(|l| l.conv.param_count() + l.bn.param_count()).sum()
    }
}

pub fn encoder_param_count(in_channels: usize, channels: [usize; 4]) -> usize {
    let mut cin = in_channels;
    let mut total = 0;
    for &c in &channels {
        total += conv_params(cin, c, 3, 1, false) + conv_params(c, c, 3, 1, false) + 4 * c;
        cin = c;
    }
    total
}

pub fn encoder_macs(in_channels: usize, channels: [usize; 4], h: usize, w: usize) -> u64 {
    let mut total = conv_macs(in_channels, channels[0], 3, 1, h / 2, w / 2);
    total += conv_macs(channels[0], channels[0], 3, 1, h / 4, w / 4);
    for s in 1..4 {
        let (oh, ow) = (h >> (s + 2), w >> (s + 2));
        total += conv_macs(channels[s - 1], channels[s], 3, 1, oh, ow) + conv_macs(channels[s], channels[s], 3, 1, oh, ow);
    }
    total
}
