//! Non-local cross-attention: every position of a query map attends over all
//! positions of a key/value map.

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::nn::Conv2d;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Nlca {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
}

impl Nlca {
    /// Query/key width is `max(1, C/2)`; the value projection keeps `C`.
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let ck = (c / 2).max(1);
        pb.scope(name, |pb| {
            Ok(Self {
                query: Conv2d::pointwise(pb, "query", c, ck, false)?,
                key: Conv2d::pointwise(pb, "key", c, ck, false)?,
                value: Conv2d::pointwise(pb, "value", c, c, false)?,
            })
        })
    }

    /// Row-stochastic `L×L` map; row `i` weights the positions of `g` seen
    /// from position `i` of `x`.
    pub fn attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, g: Var) -> Result<Var> {
        let [_, h, w] = *ctx.tape.shape(x) else {
            return Err(dim_err!("nlca expects C×H×W, got {:?}", ctx.tape.shape(x)));
        };
        if ctx.tape.shape(x) != ctx.tape.shape(g) {
            return Err(dim_err!(
                "nlca: query {:?} and key {:?} differ",
                ctx.tape.shape(x),
                ctx.tape.shape(g)
            ));
        }
        let l = h * w;
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, g)?;
        let ck = ctx.tape.shape(q)[0];
        let q = ctx.tape.reshape(q, &[ck, l])?;
        let k = ctx.tape.reshape(k, &[ck, l])?;
        let qt = ctx.tape.transpose(q)?;
        let logits = ctx.tape.matmul(qt, k)?;
        ctx.tape.softmax(logits, 1)
    }

    /// `x + V(g)·Aᵀ`, reshaped back to `x`'s shape.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, g: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let a = self.attention(ctx, x, g)?;
        let v = self.value.forward(ctx, g)?;
        let v = ctx.tape.reshape(v, &[shape[0], shape[1] * shape[2]])?;
        let at = ctx.tape.transpose(a)?;
        let out = ctx.tape.matmul(v, at)?;
        let out = ctx.tape.reshape(out, &shape)?;
        ctx.tape.add(x, out)
    }
}
