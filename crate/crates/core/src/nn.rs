//! Parameterized building blocks shared by the network modules.

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon of every [`Norm`] layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            let weight = pb.glorot("weight", &[c_out, c_in, k, k], c_in * k * k, c_out * k * k)?;
            let bias = if bias {
                Some(pb.tensor("bias", Tensor::zeros(&[c_out]))?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                stride: 1,
                pad: k / 2,
            })
        })
    }

    /// `1×1` convolution, i.e. a per-position linear map.
    pub fn pointwise<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build(pb, name, c_in, c_out, 1, bias)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-sample channel normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                gain: pb.tensor("gain", Tensor::ones(&[channels]))?,
                shift: pb.tensor("shift", Tensor::zeros(&[channels]))?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let s = ctx.param(self.shift);
        ctx.tape.channel_norm(x, g, s, T::lit(NORM_EPS))
    }
}

/// `3×3` convolution → channel norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvBlock {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                conv: Conv2d::build(pb, "conv", c_in, c_out, 3, true)?,
                norm: Norm::build(pb, "norm", c_out)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}
