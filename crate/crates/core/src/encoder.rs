//! Three-stage convolutional backbone producing multi-level side features,
//! and the `1×1` reductions to the working width.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{cfg_err, Result};
use crate::nn::{Conv2d, ConvBlock};
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    /// Side length of the (square) input image.
    pub input_size: usize,
    /// Working width `C` shared by every module after channel reduction.
    pub working_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            input_size: 64,
            working_channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != LEVELS {
            return Err(cfg_err!(
                "encoder needs exactly {LEVELS} stages, got {}",
                self.stage_channels.len()
            ));
        }
        if self.stage_channels.contains(&0) || self.working_channels == 0 {
            return Err(cfg_err!("channel counts must be positive"));
        }
        if self.input_size == 0 || self.input_size % (1 << LEVELS) != 0 {
            return Err(cfg_err!(
                "input size {} must be a positive multiple of {}",
                self.input_size,
                1 << LEVELS
            ));
        }
        Ok(())
    }

    /// `(channels, side)` of each side feature, shallow to deep.
    pub fn side_shapes(&self) -> Vec<(usize, usize)> {
        self.stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, self.input_size >> (i + 1)))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    first: ConvBlock,
    second: ConvBlock,
}

/// Backbone stages. The same structure serves as the frozen perceptual
/// extractor used by the group triplet loss.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut c_in = 3;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let stage = pb.scope(&format!("stage{}", i + 1), |pb| {
                Ok(Stage {
                    first: ConvBlock::build(pb, "block1", c_in, c)?,
                    second: ConvBlock::build(pb, "block2", c, c)?,
                })
            })?;
            stages.push(stage);
            c_in = c;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Side features at strides 2, 4 and 8 for a `3×S×S` image.
    pub fn encode_side_features<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Vec<Var>> {
        let s = self.config.input_size;
        if ctx.tape.shape(image) != [3, s, s] {
            return Err(cfg_err!(
                "encoder expects a 3×{s}×{s} image, got {:?}",
                ctx.tape.shape(image)
            ));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(LEVELS);
        for stage in &self.stages {
            x = stage.first.forward(ctx, x)?;
            x = stage.second.forward(ctx, x)?;
            let side = ctx.tape.shape(x)[1] / 2;
            x = ctx.tape.adaptive_avg_pool(x, side)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// `1×1` projection of a side feature to the working width.
#[derive(Clone, Debug)]
pub struct ChannelReducer {
    pub conv: Conv2d,
}

impl ChannelReducer {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(cfg_err!("working width must be at least 1"));
        }
        Ok(Self {
            conv: Conv2d::pointwise(pb, name, c_in, c, true)?,
        })
    }

    pub fn reduce_channels<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, feature: Var) -> Result<Var> {
        self.conv.forward(ctx, feature)
    }
}
