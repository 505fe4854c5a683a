//! The full co-saliency network and its training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::ImageGroup;
use crate::encoder::{ChannelReducer, Encoder, EncoderConfig, LEVELS};
use crate::error::{cfg_err, contract_err, dim_err, Result};
use crate::heads::{Decoder, Fusion, SaliencyMap, Sir};
use crate::losses::{self, Margin, PerceptualExtractor};
use crate::metrics::{BinaryMask, GroupPredictor};
use crate::msru::{AggregatorStats, CellKind, GroupAggregator};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub cell: CellKind,
    /// Run every window under all of its rotations.
    pub use_dom: bool,
    pub window: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            cell: CellKind::Msru,
            use_dom: true,
            window: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = self.encoder.working_channels;
        if matches!(self.cell, CellKind::Msru | CellKind::PlainRu) && c % 2 != 0 {
            return Err(cfg_err!("working width {c} must be even for the projection module"));
        }
        if self.use_dom && self.cell != CellKind::Msru {
            return Err(cfg_err!("use_dom requires the msru cell, got {:?}", self.cell));
        }
        if self.window < 2 {
            return Err(cfg_err!("window must be at least 2, got {}", self.window));
        }
        if self.encoder.input_size < 16 {
            return Err(cfg_err!("input size must be at least 16"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub soft_margin: bool,
    pub use_cocl: bool,
    /// Orders drawn per group for the contrastive loss.
    pub q: usize,
    pub tau: f64,
    /// Top-k positives; `None` means `q`, i.e. every order of the group.
    pub k: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            soft_margin: false,
            use_cocl: true,
            q: 10,
            tau: 0.1,
            k: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.tau > 0.0) {
            return Err(cfg_err!("margin must be ≥ 0 and tau > 0"));
        }
        if self.use_cocl && self.q < 2 {
            return Err(cfg_err!("the contrastive loss needs q ≥ 2 orders, got {}", self.q));
        }
        if self.k == Some(0) {
            return Err(cfg_err!("top-k must be positive"));
        }
        Ok(())
    }

    pub fn orders(&self) -> usize {
        if self.use_cocl {
            self.q
        } else {
            1
        }
    }
}

/// Per-image features that do not depend on the group order.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    /// Reduced side features, shallow to deep.
    pub x: Vec<Var>,
    /// Single-image branch outputs, shallow to deep.
    pub s: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GroupOutput {
    /// `1×S×S` maps indexed by original image.
    pub maps: Vec<Var>,
    /// Group feature of each level, shallow to deep.
    pub group: Vec<Var>,
    pub stats: AggregatorStats,
}

#[derive(Clone, Debug)]
pub struct CoSalNet {
    config: NetConfig,
    encoder: Encoder,
    reducers: Vec<ChannelReducer>,
    sir: Vec<Sir>,
    aggregators: Vec<GroupAggregator>,
    fusions: Vec<Fusion>,
    decoder: Decoder,
    perceptual: PerceptualExtractor,
}

/// Checks that `order` is a permutation of `0..n`.
pub fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(contract_err!("order has {} entries for {n} images", order.len()));
    }
    for &i in order {
        if i >= n || seen[i] {
            return Err(contract_err!("order {order:?} is not a permutation of 0..{n}"));
        }
        seen[i] = true;
    }
    Ok(())
}

impl CoSalNet {
    /// Registers every parameter in `store` (which must be empty).
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !store.is_empty() {
            return Err(contract_err!("parameter store already populated"));
        }
        let mut pb = ParamBuilder::new(store, seed);
        let c = config.encoder.working_channels;
        let encoder = pb.scope("encoder", |pb| Encoder::build(pb, &config.encoder))?;
        let mut reducers = Vec::new();
        let mut sir = Vec::new();
        let mut aggregators = Vec::new();
        let mut fusions = Vec::new();
        for (l, &ci) in config.encoder.stage_channels.iter().enumerate() {
            pb.scope(&format!("level{}", l + 1), |pb| {
                reducers.push(ChannelReducer::build(pb, "reduce", ci, c)?);
                sir.push(Sir::build(pb, "sir", c)?);
                aggregators.push(GroupAggregator::build(
                    pb,
                    "group",
                    c,
                    config.cell,
                    config.use_dom,
                    config.window,
                )?);
                fusions.push(Fusion::build(pb, "fuse", c)?);
                Ok(())
            })?;
        }
        let decoder = Decoder::build(&mut pb, "decoder", c, LEVELS)?;
        let perceptual = PerceptualExtractor::build(&mut pb, "perceptual", &config.encoder)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            reducers,
            sir,
            aggregators,
            fusions,
            decoder,
            perceptual,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn perceptual(&self) -> &PerceptualExtractor {
        &self.perceptual
    }

    pub fn encode_image<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<ImageFeatures> {
        let side = self.encoder.encode_side_features(ctx, image)?;
        let mut x = Vec::with_capacity(LEVELS);
        let mut s = Vec::with_capacity(LEVELS);
        for (l, f) in side.into_iter().enumerate() {
            let xl = self.reducers[l].reduce_channels(ctx, f)?;
            s.push(self.sir[l].forward(ctx, xl)?);
            x.push(xl);
        }
        Ok(ImageFeatures { x, s })
    }

    /// Group feature of every level with the images taken in `order`.
    pub fn group_features<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        feats: &[ImageFeatures],
        order: &[usize],
        stats: &mut AggregatorStats,
    ) -> Result<Vec<Var>> {
        check_order(order, feats.len())?;
        (0..LEVELS)
            .map(|l| {
                let seq: Vec<Var> = order.iter().map(|&i| feats[i].x[l]).collect();
                Ok(self.aggregators[l].forward(ctx, &seq, stats)?.tensor)
            })
            .collect()
    }

    /// Pre-sigmoid map of one image given the group features.
    pub fn decode_logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: &ImageFeatures, group: &[Var]) -> Result<Var> {
        let mut fused = Vec::with_capacity(LEVELS);
        for l in (0..LEVELS).rev() {
            fused.push(self.fusions[l].nonlocal_fuse(ctx, f.s[l], group[l])?);
        }
        self.decoder.logits(ctx, &fused, self.config.encoder.input_size)
    }

    /// Saliency map of one image given the group features.
    pub fn decode_image<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: &ImageFeatures, group: &[Var]) -> Result<Var> {
        let l = self.decode_logits(ctx, f, group)?;
        Ok(ctx.tape.sigmoid(l))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: &[Var], order: &[usize]) -> Result<GroupOutput> {
        let feats = images
            .iter()
            .map(|&im| self.encode_image(ctx, im))
            .collect::<Result<Vec<_>>>()?;
        let mut stats = AggregatorStats::default();
        let group = self.group_features(ctx, &feats, order, &mut stats)?;
        let maps = feats
            .iter()
            .map(|f| self.decode_image(ctx, f, &group))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupOutput { maps, group, stats })
    }

    /// Inference on a stored group; maps are returned by original image.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        group: &ImageGroup,
        order: &[usize],
    ) -> Result<Vec<SaliencyMap>> {
        let size = self.config.encoder.input_size;
        if group.size() != size {
            return Err(dim_err!("group {} has {}px images, model expects {size}", group.id, group.size()));
        }
        let mut ctx = Ctx::infer(params);
        let images: Vec<Var> = group.images.iter().map(|im| ctx.input(im.cast())).collect();
        let out = self.forward(&mut ctx, &images, order)?;
        out.maps
            .iter()
            .enumerate()
            .map(|(i, &m)| SaliencyMap::from_tensor(ctx.value(m), i))
            .collect()
    }

    /// Joint objective over a batch of groups. `orders[g]` holds the orders
    /// drawn for group `g`; the first one produces the supervised maps and
    /// every one contributes an embedding to the contrastive term.
    pub fn batch_loss<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        batch: &[(Vec<Var>, Vec<Var>)],
        orders: &[Vec<Vec<usize>>],
        cfg: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() || orders.len() != batch.len() {
            return Err(contract_err!("{} groups with {} order sets", batch.len(), orders.len()));
        }
        let margin = if cfg.soft_margin { Margin::Softplus } else { Margin::Hinge };
        let mut ls_terms = Vec::new();
        let mut lc_terms = Vec::new();
        // embeddings[g][j][l]
        let mut embeddings: Vec<Vec<Vec<Var>>> = Vec::new();
        let mut stats = AggregatorStats::default();
        for ((images, masks), group_orders) in batch.iter().zip(orders) {
            if images.len() != masks.len() || images.len() < 2 {
                return Err(contract_err!("a training group needs ≥ 2 images with masks"));
            }
            let want = cfg.orders();
            if group_orders.len() < want {
                return Err(contract_err!("{want} orders needed, got {}", group_orders.len()));
            }
            let feats = images
                .iter()
                .map(|&im| self.encode_image(ctx, im))
                .collect::<Result<Vec<_>>>()?;
            let mut per_order = Vec::new();
            for order in &group_orders[..want] {
                let g = self.group_features(ctx, &feats, order, &mut stats)?;
                per_order.push(g);
            }
            let mut bces = Vec::new();
            let (mut det, mut pos, mut neg) = (Vec::new(), Vec::new(), Vec::new());
            for ((f, &im), &gt) in feats.iter().zip(images).zip(masks) {
                let logits = self.decode_logits(ctx, f, &per_order[0])?;
                let b = losses::bce_with_logits(&mut ctx.tape, logits, gt)?;
                let m = ctx.tape.sigmoid(logits);
                bces.push(ctx.tape.reshape(b, &[1])?);
                let tr = losses::make_masked_triplet(&mut ctx.tape, im, m, gt)?;
                det.push(self.perceptual.perceptual_embed(ctx, tr.detected)?);
                pos.push(self.perceptual.perceptual_embed(ctx, tr.positive)?);
                neg.push(self.perceptual.perceptual_embed(ctx, tr.negative)?);
            }
            let all = ctx.tape.concat(&bces, 0)?;
            ls_terms.push(ctx.tape.mean(all));
            let lc = losses::group_triplet(&mut ctx.tape, &det, &pos, &neg, T::lit(cfg.margin), margin)?;
            lc_terms.push(lc);
            if cfg.use_cocl {
                let mut emb = Vec::new();
                for g in &per_order {
                    emb.push(
                        g.iter()
                            .map(|&gl| losses::order_embedding(&mut ctx.tape, gl))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                embeddings.push(emb);
            }
        }
        let ls = mean_of(ctx, &ls_terms)?;
        let lc = mean_of(ctx, &lc_terms)?;
        let lcocl = if cfg.use_cocl {
            let k = cfg.k.unwrap_or(cfg.q);
            let mut terms = Vec::new();
            for l in 0..LEVELS {
                let rows: Vec<Var> = embeddings.iter().flat_map(|e| e.iter().map(move |o| o[l])).collect();
                let bank = losses::stack_bank(&mut ctx.tape, &rows)?;
                for e in &embeddings {
                    let t = losses::cocl(&mut ctx.tape, e[0][l], e[1][l], bank, bank, cfg.tau, k)?;
                    terms.push(t);
                }
            }
            mean_of(ctx, &terms)?
        } else {
            ctx.input(Tensor::scalar(T::zero()))
        };
        let total = losses::total_loss(&mut ctx.tape, ls, lc, lcocl)?;
        let item = |v: Var| ctx.value(v).item().to_f64_lossy();
        let breakdown = LossBreakdown {
            saliency: item(ls),
            triplet: item(lc),
            contrastive: item(lcocl),
            total: item(total),
            stats,
        };
        Ok((total, breakdown))
    }
}

fn mean_of<T: Scalar>(ctx: &mut Ctx<'_, T>, terms: &[Var]) -> Result<Var> {
    let rows = terms
        .iter()
        .map(|&t| ctx.tape.reshape(t, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let all = ctx.tape.concat(&rows, 0)?;
    Ok(ctx.tape.mean(all))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub saliency: f64,
    pub triplet: f64,
    pub contrastive: f64,
    pub total: f64,
    pub stats: AggregatorStats,
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: CoSalNet,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = CoSalNet::build(&mut params, config, seed)?;
        Ok(Self { net, params })
    }
}

impl<T: Scalar> GroupPredictor for Model<T> {
    fn predict(&self, group: &ImageGroup, order: &[usize]) -> Result<Vec<SaliencyMap>> {
        self.net.predict(&self.params, group, order)
    }
}

/// `1×H×W` tensor of a mask.
pub fn mask_tensor<T: Scalar>(mask: &BinaryMask) -> Tensor<T> {
    let data = mask.values.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    Tensor::new(&[1, mask.height, mask.width], data).expect("mask length matches its shape")
}
