//! Co-attention feature projection: pooled group and image descriptors are
//! matched against every position, and complementary attention maps project
//! both into a shared half-width subspace before their sum is restored to
//! `C` channels.

use crate::autodiff::Var;
use crate::error::{cfg_err, dim_err, Result};
use crate::nn::Conv2d;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

/// Pyramid bins before clipping to the feature size.
pub const PPM_BINS: [usize; 4] = [1, 3, 6, 8];

/// Bins kept for an `h×w` map: those not exceeding `min(h, w)`, ascending.
pub fn pyramid_bins(h: usize, w: usize) -> Vec<usize> {
    let limit = h.min(w);
    let mut bins: Vec<usize> = PPM_BINS.iter().map(|&b| b.min(limit)).collect();
    bins.dedup();
    bins
}

/// Pools `C×h×w` at each bin and concatenates to `C×L_g`, `L_g = Σ bin²`.
pub fn pyramid_pool<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let [c, h, w] = *ctx.tape.shape(x) else {
        return Err(dim_err!("pyramid pooling expects C×H×W, got {:?}", ctx.tape.shape(x)));
    };
    let mut parts = Vec::new();
    for b in pyramid_bins(h, w) {
        let p = ctx.tape.adaptive_avg_pool(x, b)?;
        parts.push(ctx.tape.reshape(p, &[c, b * b])?);
    }
    ctx.tape.concat(&parts, 1)
}

#[derive(Clone, Debug)]
pub struct Cfpm {
    pub wg: [Conv2d; 3],
    pub ws: [Conv2d; 3],
    pub out: Conv2d,
}

/// Intermediate maps, exposed for inspection in tests.
pub struct CfpmTrace {
    pub z: Var,
    pub z_comp: Var,
    pub out: Var,
}

impl Cfpm {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        if c % 2 != 0 || c == 0 {
            return Err(cfg_err!("co-attention projection needs an even width, got {c}"));
        }
        let c1 = c / 2;
        pb.scope(name, |pb| {
            let proj = |tag: &str, pb: &mut ParamBuilder<'_, T>| -> Result<[Conv2d; 3]> {
                Ok([
                    Conv2d::pointwise(pb, &format!("{tag}1"), c, c1, false)?,
                    Conv2d::pointwise(pb, &format!("{tag}2"), c, c1, false)?,
                    Conv2d::pointwise(pb, &format!("{tag}3"), c, c1, false)?,
                ])
            };
            let wg = proj("wg", pb)?;
            let ws = proj("ws", pb)?;
            Ok(Self {
                wg,
                ws,
                out: Conv2d::pointwise(pb, "out", c1, c, true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, g: Var, x_out: Var, x: Var) -> Result<Var> {
        Ok(self.trace(ctx, g, x_out, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, g: Var, x_out: Var, x: Var) -> Result<CfpmTrace> {
        let shape = ctx.tape.shape(g).to_vec();
        if ctx.tape.shape(x_out) != shape.as_slice() || ctx.tape.shape(x) != shape.as_slice() {
            return Err(dim_err!(
                "cfpm inputs differ: {:?}, {:?}, {:?}",
                shape,
                ctx.tape.shape(x_out),
                ctx.tape.shape(x)
            ));
        }
        let [_, h, w] = shape[..] else {
            return Err(dim_err!("cfpm expects C×H×W, got {shape:?}"));
        };
        let l = h * w;
        if l < 2 {
            return Err(cfg_err!("cfpm needs at least two positions"));
        }
        let a_g = self.similarity(ctx, &self.wg, g, l)?;
        let a_s = self.similarity(ctx, &self.ws, x, l)?;
        let a = ctx.tape.add(a_g, a_s)?;
        let z = ctx.tape.softmax(a, 1)?;
        let neg = ctx.tape.scale(z, -T::one());
        let comp = ctx.tape.add_scalar(neg, T::one());
        let z_comp = ctx.tape.normalize_rows(comp)?;

        let g_tilde = self.project(ctx, &self.wg[2], g, z)?;
        let x_tilde = self.project(ctx, &self.ws[2], x_out, z_comp)?;
        let sum = ctx.tape.add(g_tilde, x_tilde)?;
        let c1 = ctx.tape.shape(sum)[0];
        let sum = ctx.tape.reshape(sum, &[c1, h, w])?;
        let out = self.out.forward(ctx, sum)?;
        Ok(CfpmTrace { z, z_comp, out })
    }

    /// `PPM(W¹y)ᵀ · W²y`, an `L_g×L` matrix.
    fn similarity<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, w: &[Conv2d; 3], y: Var, l: usize) -> Result<Var> {
        let p = w[0].forward(ctx, y)?;
        let p = pyramid_pool(ctx, p)?;
        let pt = ctx.tape.transpose(p)?;
        let f = w[1].forward(ctx, y)?;
        let c1 = ctx.tape.shape(f)[0];
        let f = ctx.tape.reshape(f, &[c1, l])?;
        ctx.tape.matmul(pt, f)
    }

    /// `PPM(W³y) · attn`, a `C1×L` matrix.
    fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, w: &Conv2d, y: Var, attn: Var) -> Result<Var> {
        let p = w.forward(ctx, y)?;
        let p = pyramid_pool(ctx, p)?;
        ctx.tape.matmul(p, attn)
    }
}
