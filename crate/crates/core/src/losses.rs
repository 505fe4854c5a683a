//! Pixel supervision, the perceptual group triplet objective, and the
//! cross-order contrastive loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{cfg_err, contract_err, dim_err, Error, Result};
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

/// Clamp applied to predicted probabilities before taking logs.
pub const PROB_CLAMP: f64 = crate::autodiff::LOG_FLOOR;

/// Added under the square root of Euclidean distances so the gradient stays
/// finite at zero distance.
pub const DIST_EPS: f64 = 1e-12;

/// Margin function of the triplet loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Margin {
    Hinge,
    Softplus,
}

/// Mean binary cross-entropy between a probability map and a `{0,1}` mask.
pub fn bce<T: Scalar>(tape: &mut Tape<T>, m: Var, gt: Var) -> Result<Var> {
    if tape.shape(m) != tape.shape(gt) {
        return Err(dim_err!("bce: map {:?} vs mask {:?}", tape.shape(m), tape.shape(gt)));
    }
    // The log op floors its argument at PROB_CLAMP, which clamps both
    // m and 1 − m.
    let log_m = tape.log(m);
    let neg_m = tape.scale(m, -T::one());
    let one_minus_m = tape.add_scalar(neg_m, T::one());
    let log_1m = tape.log(one_minus_m);
    let neg_gt = tape.scale(gt, -T::one());
    let one_minus_gt = tape.add_scalar(neg_gt, T::one());
    let pos = tape.mul(gt, log_m)?;
    let neg = tape.mul(one_minus_gt, log_1m)?;
    let s = tape.add(pos, neg)?;
    let mean = tape.mean(s);
    Ok(tape.scale(mean, -T::one()))
}

/// [`bce`] evaluated from pre-sigmoid logits as `softplus(l) − g·l`, which
/// keeps a useful gradient when the sigmoid saturates.
pub fn bce_with_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, gt: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(gt) {
        return Err(dim_err!("bce: logits {:?} vs mask {:?}", tape.shape(logits), tape.shape(gt)));
    }
    let sp = tape.softplus(logits);
    let gl = tape.mul(gt, logits)?;
    let d = tape.sub(sp, gl)?;
    Ok(tape.mean(d))
}

/// The three masked versions of one image.
#[derive(Clone, Copy, Debug)]
pub struct MaskedTriplet {
    /// Image masked by the prediction.
    pub detected: Var,
    /// Image masked by the ground truth.
    pub positive: Var,
    /// Image masked by the ground-truth complement.
    pub negative: Var,
}

/// `image` is `3×H×W`; `m` and `gt` are `1×H×W`.
pub fn make_masked_triplet<T: Scalar>(tape: &mut Tape<T>, image: Var, m: Var, gt: Var) -> Result<MaskedTriplet> {
    let rgb = |tape: &mut Tape<T>, mask: Var| tape.concat(&[mask, mask, mask], 0);
    let m3 = rgb(tape, m)?;
    let g3 = rgb(tape, gt)?;
    let neg = tape.scale(g3, -T::one());
    let ng3 = tape.add_scalar(neg, T::one());
    Ok(MaskedTriplet {
        detected: tape.mul(image, m3)?,
        positive: tape.mul(image, g3)?,
        negative: tape.mul(image, ng3)?,
    })
}

/// Fixed embedding for the triplet loss: a frozen, randomly initialized
/// encoder followed by global average pooling of its deepest feature.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    encoder: Encoder,
}

impl PerceptualExtractor {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, config: &EncoderConfig) -> Result<Self> {
        let encoder = pb.frozen(|pb| pb.scope(name, |pb| Encoder::build(pb, config)))?;
        Ok(Self { encoder })
    }

    pub fn dim(&self) -> usize {
        self.encoder.config().stage_channels[2]
    }

    pub fn perceptual_embed<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image_like: Var) -> Result<Var> {
        let feats = self.encoder.encode_side_features(ctx, image_like)?;
        ctx.tape.spatial_mean(feats[2])
    }
}

fn distance<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    let s = tape.add_scalar(s, T::lit(DIST_EPS));
    Ok(tape.sqrt(s))
}

/// Group triplet loss over perceptual embeddings.
///
/// Anchor `n` compares its detected embedding with the hardest positive
/// (farthest ground-truth embedding) and hardest negative (closest
/// complement embedding) among the other images `m ≠ n`. The per-anchor
/// terms are averaged.
pub fn group_triplet<T: Scalar>(
    tape: &mut Tape<T>,
    detected: &[Var],
    positive: &[Var],
    negative: &[Var],
    b: T,
    margin: Margin,
) -> Result<Var> {
    let n = detected.len();
    if n < 2 {
        return Err(contract_err!("group triplet needs at least two images, got {n}"));
    }
    if positive.len() != n || negative.len() != n {
        return Err(dim_err!("group triplet: {n} anchors, {} positives, {} negatives", positive.len(), negative.len()));
    }
    let mut terms = Vec::with_capacity(n);
    for a in 0..n {
        let mut dp = Vec::with_capacity(n - 1);
        let mut dn = Vec::with_capacity(n - 1);
        for m in (0..n).filter(|&m| m != a) {
            let p = distance(tape, detected[a], positive[m])?;
            dp.push(tape.reshape(p, &[1])?);
            let q = distance(tape, detected[a], negative[m])?;
            dn.push(tape.reshape(q, &[1])?);
        }
        let dp = tape.concat(&dp, 0)?;
        let dn = tape.concat(&dn, 0)?;
        let hardest_pos = tape.max(dp)?;
        let hardest_neg = tape.min(dn)?;
        let diff = tape.sub(hardest_pos, hardest_neg)?;
        let arg = tape.add_scalar(diff, b);
        let h = match margin {
            Margin::Hinge => tape.relu(arg),
            Margin::Softplus => tape.softplus(arg),
        };
        terms.push(tape.reshape(h, &[1])?);
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.mean(all))
}

/// Unit-norm group embedding: `L2norm(GAP(G))`.
pub fn order_embedding<T: Scalar>(tape: &mut Tape<T>, group_feature: Var) -> Result<Var> {
    let pooled = tape.spatial_mean(group_feature)?;
    tape.l2_normalize(pooled)
}

/// Stacks unit vectors into an `N×C` bank.
pub fn stack_bank<T: Scalar>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    let rows = rows
        .iter()
        .map(|&r| {
            let c = tape.shape(r)[0];
            tape.reshape(r, &[1, c])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

/// Indices of the `k` largest values, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Cross-order contrastive loss `L_{u→v} + L_{v→u}`.
///
/// `bank_u`, `bank_v` are `N×C`; `z_u`, `z_v` are length-`C` anchors. Both
/// directions share the products `s_i^u·s_i^v/τ`; each takes its positives
/// from the top-`k` similarities of its own anchor.
pub fn cocl<T: Scalar>(
    tape: &mut Tape<T>,
    z_u: Var,
    z_v: Var,
    bank_u: Var,
    bank_v: Var,
    tau: f64,
    k: usize,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(cfg_err!("temperature must be positive, got {tau}"));
    }
    if tape.shape(bank_u) != tape.shape(bank_v) {
        return Err(dim_err!("banks differ: {:?} vs {:?}", tape.shape(bank_u), tape.shape(bank_v)));
    }
    let [nb, c] = *tape.shape(bank_u) else {
        return Err(dim_err!("bank must be N×C, got {:?}", tape.shape(bank_u)));
    };
    if k == 0 || k > nb {
        return Err(cfg_err!("top-k of {k} from a bank of {nb}"));
    }
    let sim = |tape: &mut Tape<T>, bank: Var, z: Var| -> Result<Var> {
        let zc = tape.reshape(z, &[c, 1])?;
        let s = tape.matmul(bank, zc)?;
        tape.reshape(s, &[nb])
    };
    let s_u = sim(tape, bank_u, z_u)?;
    let s_v = sim(tape, bank_v, z_v)?;
    let prod = tape.mul(s_u, s_v)?;
    let logits = tape.scale(prod, T::lit(1.0 / tau));
    let denom = tape.logsumexp(logits)?;
    let direction = |tape: &mut Tape<T>, s: Var| -> Result<Var> {
        let vals: Vec<f64> = tape.value(s).to_f64_vec();
        let mut pos = top_k(&vals, k);
        // Summing in index order makes the full positive set reproduce the
        // denominator exactly.
        pos.sort_unstable();
        let picked = tape.gather(logits, &pos)?;
        let num = tape.logsumexp(picked)?;
        tape.sub(denom, num)
    };
    let uv = direction(tape, s_u)?;
    let vu = direction(tape, s_v)?;
    tape.add(uv, vu)
}

/// `L_s + L_c + L_cocl`, refusing non-finite terms.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, ls: Var, lc: Var, lcocl: Var) -> Result<Var> {
    for (name, v) in [("saliency", ls), ("triplet", lc), ("contrastive", lcocl)] {
        let x = tape.value(v);
        if x.len() != 1 {
            return Err(dim_err!("{name} loss is not a scalar"));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {}", x.item())));
        }
    }
    let s = tape.add(ls, lc)?;
    tape.add(s, lcocl)
}
