//! Single-image branch, group/single fusion, and the map decoder.

use crate::autodiff::Var;
use crate::error::{cfg_err, dim_err, Result};
use crate::msru::Nlca;
use crate::nn::{Conv2d, ConvBlock};
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial scale of the prediction heads relative to Glorot, so that the
/// first maps start near 0.5 instead of saturating.
pub const HEAD_INIT_GAIN: f64 = 0.1;

/// Per-pixel probabilities for one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Index of the source image within its group.
    pub image: usize,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, image: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(dim_err!("{} values for a {height}×{width} map", values.len()));
        }
        Ok(Self {
            height,
            width,
            values,
            image,
        })
    }

    /// From a `1×H×W` or `H×W` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, image: usize) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            ref s => return Err(dim_err!("saliency map must be 1×H×W, got {s:?}")),
        };
        Self::new(h, w, t.to_f64_vec(), image)
    }
}

/// Three `3×3` conv blocks refining a single image's feature.
#[derive(Clone, Debug)]
pub struct Sir {
    pub blocks: [ConvBlock; 3],
}

impl Sir {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                blocks: [
                    ConvBlock::build(pb, "block1", c, c)?,
                    ConvBlock::build(pb, "block2", c, c)?,
                    ConvBlock::build(pb, "block3", c, c)?,
                ],
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |x, b| b.forward(ctx, x))
    }
}

/// Non-local fusion: the single-image feature queries the group feature.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub attn: Nlca,
}

impl Fusion {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            attn: Nlca::build(pb, name, c)?,
        })
    }

    pub fn nonlocal_fuse<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, s: Var, g: Var) -> Result<Var> {
        self.attn.forward(ctx, s, g)
    }
}

/// Per-level `1×1` logit heads merged coarse to fine by nearest-neighbour
/// upsampling and addition.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Deep to shallow.
    pub heads: Vec<Conv2d>,
}

impl Decoder {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, levels: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let heads = (0..levels)
                .map(|i| {
                    pb.scope(&format!("head{i}"), |pb| {
                        Ok(Conv2d {
                            weight: pb.glorot_scaled("weight", &[1, c, 1, 1], c, 1, HEAD_INIT_GAIN)?,
                            bias: Some(pb.tensor("bias", Tensor::zeros(&[1]))?),
                            stride: 1,
                            pad: 0,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Self { heads })
        })
    }

    /// Pre-sigmoid `1×S×S` logits.
    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: &[Var], target: usize) -> Result<Var> {
        if levels.len() != self.heads.len() || levels.is_empty() {
            return Err(cfg_err!("decoder has {} heads, got {} levels", self.heads.len(), levels.len()));
        }
        let mut acc: Option<Var> = None;
        for (head, &lvl) in self.heads.iter().zip(levels) {
            let logit = head.forward(ctx, lvl)?;
            acc = Some(match acc {
                None => logit,
                Some(prev) => {
                    let up = ctx.tape.upsample2x(prev)?;
                    if ctx.tape.shape(up) != ctx.tape.shape(logit) {
                        return Err(cfg_err!(
                            "decoder levels not in a 2× relation: {:?} after upsampling vs {:?}",
                            ctx.tape.shape(up),
                            ctx.tape.shape(logit)
                        ));
                    }
                    ctx.tape.add(up, logit)?
                }
            });
        }
        let mut out = acc.expect("at least one level");
        while ctx.tape.shape(out)[1] < target {
            out = ctx.tape.upsample2x(out)?;
        }
        if ctx.tape.shape(out) != [1, target, target] {
            return Err(cfg_err!(
                "decoded size {:?} does not reach target {target}",
                ctx.tape.shape(out)
            ));
        }
        Ok(out)
    }

    /// Saliency probabilities in `[0, 1]`, `1×S×S`.
    pub fn decode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: &[Var], target: usize) -> Result<Var> {
        let l = self.logits(ctx, levels, target)?;
        Ok(ctx.tape.sigmoid(l))
    }
}
