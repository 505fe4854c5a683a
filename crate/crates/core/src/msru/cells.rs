//! Recurrent cells that fold an ordered feature sequence into one state.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{contract_err, dim_err, Result};
use crate::nn::Conv2d;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

use super::cfpm::Cfpm;
use super::nlca::Nlca;

/// Which recurrence aggregates the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Sliding windows, optional multi-order paths, then a second pass.
    Msru,
    /// One attention/projection recurrence over the whole sequence.
    PlainRu,
    Gru,
    Lstm,
}

/// Attention-gated recurrent unit: the state starts as the first feature,
/// and each later feature is denoised against it and merged into it.
#[derive(Clone, Debug)]
pub struct RecurrentUnit {
    pub nlca: Nlca,
    pub cfpm: Cfpm,
}

/// Epsilon of the state normalization in [`RecurrentUnit::step`].
pub const STATE_EPS: f64 = 1e-6;

impl RecurrentUnit {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                nlca: Nlca::build(pb, "nlca", c)?,
                cfpm: Cfpm::build(pb, "cfpm", c)?,
            })
        })
    }

    pub fn step<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, g: Var, x: Var) -> Result<Var> {
        let x_out = self.nlca.forward(ctx, x, g)?;
        // Rescaled to unit RMS: without it the state grows geometrically
        // with the number of steps.
        let y = self.cfpm.forward(ctx, g, x_out, x)?;
        ctx.tape.rms_norm(y, T::lit(STATE_EPS))
    }
}

/// Convolutional GRU with `3×3` gates; the hidden state starts as the first
/// feature.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub update: Conv2d,
    pub reset: Conv2d,
    pub candidate: Conv2d,
}

impl ConvGru {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                update: Conv2d::build(pb, "update", 2 * c, c, 3, true)?,
                reset: Conv2d::build(pb, "reset", 2 * c, c, 3, true)?,
                candidate: Conv2d::build(pb, "candidate", 2 * c, c, 3, true)?,
            })
        })
    }

    pub fn step<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var, x: Var) -> Result<Var> {
        let xh = ctx.tape.concat(&[x, h], 0)?;
        let z = self.update.forward(ctx, xh)?;
        let z = ctx.tape.sigmoid(z);
        let r = self.reset.forward(ctx, xh)?;
        let r = ctx.tape.sigmoid(r);
        let rh = ctx.tape.mul(r, h)?;
        let xrh = ctx.tape.concat(&[x, rh], 0)?;
        let cand = self.candidate.forward(ctx, xrh)?;
        let cand = ctx.tape.tanh(cand);
        // h + z·(cand − h)
        let delta = ctx.tape.sub(cand, h)?;
        let delta = ctx.tape.mul(z, delta)?;
        ctx.tape.add(h, delta)
    }
}

/// Convolutional LSTM; hidden and cell state both start as the first feature.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub input: Conv2d,
    pub forget: Conv2d,
    pub output: Conv2d,
    pub cell: Conv2d,
}

impl ConvLstm {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                input: Conv2d::build(pb, "input", 2 * c, c, 3, true)?,
                forget: Conv2d::build(pb, "forget", 2 * c, c, 3, true)?,
                output: Conv2d::build(pb, "output", 2 * c, c, 3, true)?,
                cell: Conv2d::build(pb, "cell", 2 * c, c, 3, true)?,
            })
        })
    }

    pub fn step<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var, c: Var, x: Var) -> Result<(Var, Var)> {
        let xh = ctx.tape.concat(&[x, h], 0)?;
        let gate = |conv: &Conv2d, ctx: &mut Ctx<'_, T>| -> Result<Var> {
            let v = conv.forward(ctx, xh)?;
            Ok(ctx.tape.sigmoid(v))
        };
        let i = gate(&self.input, ctx)?;
        let f = gate(&self.forget, ctx)?;
        let o = gate(&self.output, ctx)?;
        let g = self.cell.forward(ctx, xh)?;
        let g = ctx.tape.tanh(g);
        let fc = ctx.tape.mul(f, c)?;
        let ig = ctx.tape.mul(i, g)?;
        let c = ctx.tape.add(fc, ig)?;
        let tc = ctx.tape.tanh(c);
        let h = ctx.tape.mul(o, tc)?;
        Ok((h, c))
    }
}

#[derive(Clone, Debug)]
pub enum Cell {
    Ru(RecurrentUnit),
    Gru(ConvGru),
    Lstm(ConvLstm),
}

impl Cell {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, kind: CellKind, c: usize) -> Result<Self> {
        Ok(match kind {
            CellKind::Msru | CellKind::PlainRu => Cell::Ru(RecurrentUnit::build(pb, name, c)?),
            CellKind::Gru => Cell::Gru(ConvGru::build(pb, name, c)?),
            CellKind::Lstm => Cell::Lstm(ConvLstm::build(pb, name, c)?),
        })
    }

    /// Folds `seq` in order. Returns the final state and the number of
    /// recurrence steps taken (`len − 1`).
    pub fn run<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, seq: &[Var]) -> Result<(Var, usize)> {
        let Some((&first, rest)) = seq.split_first() else {
            return Err(contract_err!("recurrence over an empty sequence"));
        };
        let shape = ctx.tape.shape(first).to_vec();
        if let Some(bad) = rest.iter().find(|v| ctx.tape.shape(**v) != shape.as_slice()) {
            return Err(dim_err!(
                "recurrence inputs differ: {shape:?} vs {:?}",
                ctx.tape.shape(*bad)
            ));
        }
        let mut h = first;
        let mut c = first;
        for &x in rest {
            match self {
                Cell::Ru(ru) => h = ru.step(ctx, h, x)?,
                Cell::Gru(gru) => h = gru.step(ctx, h, x)?,
                Cell::Lstm(lstm) => (h, c) = lstm.step(ctx, h, c, x)?,
            }
        }
        Ok((h, rest.len()))
    }
}
