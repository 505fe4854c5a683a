//! Group-feature aggregation over an ordered image sequence.
//!
//! In the multi-path mode the sequence is cut into cyclic windows, each
//! window is folded under every rotation, the per-path states are merged,
//! and a second recurrence folds the window features into the group
//! feature. The other modes fold the whole sequence once.

mod cells;
mod cfpm;
mod nlca;
mod order;

pub use cells::{Cell, CellKind, ConvGru, ConvLstm, RecurrentUnit};
pub use cfpm::{pyramid_bins, pyramid_pool, Cfpm, CfpmTrace, PPM_BINS};
pub use nlca::Nlca;
pub use order::{build_subgroups, dummy_orders, OrderPlan};

use crate::autodiff::Var;
use crate::error::{cfg_err, contract_err, Result};
use crate::nn::Conv2d;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Subgroup(usize),
    Final,
}

/// A `C×h×w` consensus feature on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupFeature {
    pub tensor: Var,
    pub provenance: Provenance,
}

/// Counters filled during aggregation, used to verify routing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AggregatorStats {
    /// Windows whose rotations were generated.
    pub dummy_order_windows: usize,
    /// Recurrence runs (one per path, plus the final pass).
    pub runs: usize,
    pub steps: usize,
}

impl std::ops::AddAssign for AggregatorStats {
    fn add_assign(&mut self, o: Self) {
        self.dummy_order_windows += o.dummy_order_windows;
        self.runs += o.runs;
        self.steps += o.steps;
    }
}

#[derive(Clone, Debug)]
pub struct GroupAggregator {
    kind: CellKind,
    multi_order: bool,
    window: usize,
    first: Cell,
    /// Second-stage recurrence over window features (multi-path mode only).
    second: Option<Cell>,
    /// `k·C → C` reduction of concatenated paths.
    merge: Option<Conv2d>,
}

impl GroupAggregator {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        kind: CellKind,
        multi_order: bool,
        window: usize,
    ) -> Result<Self> {
        if multi_order && kind != CellKind::Msru {
            return Err(cfg_err!("multiple orders require the msru cell, got {kind:?}"));
        }
        if window < 2 {
            return Err(cfg_err!("window size must be at least 2, got {window}"));
        }
        pb.scope(name, |pb| {
            let first = Cell::build(pb, "ru1", kind, c)?;
            let (second, merge) = if kind == CellKind::Msru {
                let second = Cell::build(pb, "ru2", kind, c)?;
                let merge = if multi_order {
                    Some(Conv2d::pointwise(pb, "merge", window * c, c, true)?)
                } else {
                    None
                };
                (Some(second), merge)
            } else {
                (None, None)
            };
            Ok(Self {
                kind,
                multi_order,
                window,
                first,
                second,
                merge,
            })
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn multi_order(&self) -> bool {
        self.multi_order
    }

    /// Folds `features` in the given order into one state.
    pub fn ru_run<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: &[Var],
        stats: &mut AggregatorStats,
    ) -> Result<Var> {
        let (h, steps) = self.first.run(ctx, features)?;
        stats.runs += 1;
        stats.steps += steps;
        Ok(h)
    }

    /// Per-path states of one window, one per order in `orders` (indices
    /// into `features`).
    pub fn subgroup_paths<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: &[Var],
        orders: &[Vec<usize>],
        stats: &mut AggregatorStats,
    ) -> Result<Vec<Var>> {
        orders
            .iter()
            .map(|o| {
                let seq: Vec<Var> = o.iter().map(|&i| features[i]).collect();
                self.ru_run(ctx, &seq, stats)
            })
            .collect()
    }

    /// Window feature from the window's images in window order.
    pub fn msru_subgroup<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        window_features: &[Var],
        index: usize,
        stats: &mut AggregatorStats,
    ) -> Result<GroupFeature> {
        let local: Vec<usize> = (0..window_features.len()).collect();
        let orders = if self.multi_order {
            stats.dummy_order_windows += 1;
            dummy_orders(&local)
        } else {
            vec![local]
        };
        let paths = self.subgroup_paths(ctx, window_features, &orders, stats)?;
        let tensor = self.merge_paths(ctx, &paths)?;
        Ok(GroupFeature {
            tensor,
            provenance: Provenance::Subgroup(index),
        })
    }

    fn merge_paths<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, paths: &[Var]) -> Result<Var> {
        match (&self.merge, paths) {
            (None, [single]) => Ok(*single),
            (Some(merge), _) => {
                let cat = ctx.tape.concat(paths, 0)?;
                merge.forward(ctx, cat)
            }
            (None, _) => Err(contract_err!("{} paths but no merge layer", paths.len())),
        }
    }

    /// Second recurrence over window features in ascending window order.
    pub fn final_group_feature<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        subgroups: &[GroupFeature],
        stats: &mut AggregatorStats,
    ) -> Result<GroupFeature> {
        let cell = self
            .second
            .as_ref()
            .ok_or_else(|| contract_err!("final pass needs the msru cell"))?;
        let seq: Vec<Var> = subgroups.iter().map(|g| g.tensor).collect();
        let (h, steps) = cell.run(ctx, &seq)?;
        stats.runs += 1;
        stats.steps += steps;
        Ok(GroupFeature {
            tensor: h,
            provenance: Provenance::Final,
        })
    }

    /// Group feature of `features`, taken in the given sequence order.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: &[Var],
        stats: &mut AggregatorStats,
    ) -> Result<GroupFeature> {
        if self.kind != CellKind::Msru {
            let tensor = self.ru_run(ctx, features, stats)?;
            return Ok(GroupFeature {
                tensor,
                provenance: Provenance::Final,
            });
        }
        let plan = OrderPlan::new(features.len(), self.window, self.multi_order)?;
        let mut subgroups = Vec::with_capacity(plan.subgroups.len());
        for (i, window) in plan.subgroups.iter().enumerate() {
            let wf: Vec<Var> = window.iter().map(|&p| features[p]).collect();
            subgroups.push(self.msru_subgroup(ctx, &wf, i, stats)?);
        }
        self.final_group_feature(ctx, &subgroups, stats)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn setup(kind: CellKind, dom: bool, seed: u64) -> (GroupAggregator, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let agg = GroupAggregator::build(&mut pb, "agg", 4, kind, dom, 3).unwrap();
        (agg, store)
    }

    fn inputs(ctx: &mut Ctx<'_, f64>, n: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ctx.input(Tensor::uniform(&[4, 4, 4], 1.0, &mut rng)))
            .collect()
    }

    #[test]
    fn dom_requires_msru() {
        let mut store = ParamStore::<f64>::new();
        let mut pb = ParamBuilder::new(&mut store, 0);
        assert!(GroupAggregator::build(&mut pb, "a", 4, CellKind::Gru, true, 3).is_err());
    }

    #[test]
    fn concat_width_is_three_c() {
        let (agg, store) = setup(CellKind::Msru, true, 1);
        let merge = agg.merge.as_ref().unwrap();
        assert_eq!(store.get(merge.weight).shape(), &[4, 12, 1, 1]);
    }

    #[test]
    fn routing_counts() {
        let n = 5;
        let (agg, store) = setup(CellKind::Msru, true, 2);
        let mut ctx = Ctx::infer(&store);
        let xs = inputs(&mut ctx, n, 3);
        let mut stats = AggregatorStats::default();
        let g = agg.forward(&mut ctx, &xs, &mut stats).unwrap();
        assert_eq!(g.provenance, Provenance::Final);
        assert_eq!(ctx.tape.shape(g.tensor), &[4, 4, 4]);
        assert_eq!(
            stats,
            AggregatorStats {
                dummy_order_windows: n,
                runs: 3 * n + 1,
                steps: 3 * n * 2 + (n - 1),
            }
        );

        let (agg, store) = setup(CellKind::Msru, false, 2);
        let mut ctx = Ctx::infer(&store);
        let xs = inputs(&mut ctx, n, 3);
        let mut stats = AggregatorStats::default();
        agg.forward(&mut ctx, &xs, &mut stats).unwrap();
        assert_eq!(stats.dummy_order_windows, 0);
        assert_eq!(stats.runs, n + 1);

        let (agg, store) = setup(CellKind::PlainRu, false, 2);
        let mut ctx = Ctx::infer(&store);
        let xs = inputs(&mut ctx, n, 3);
        let mut stats = AggregatorStats::default();
        agg.forward(&mut ctx, &xs, &mut stats).unwrap();
        assert_eq!((stats.runs, stats.steps), (1, n - 1));
    }

    #[test]
    fn path_multiset_invariant_under_window_rotation() {
        let (agg, store) = setup(CellKind::Msru, true, 4);
        let mut ctx = Ctx::infer(&store);
        let xs = inputs(&mut ctx, 3, 5);
        let local: Vec<usize> = (0..3).collect();
        let mut stats = AggregatorStats::default();
        let base = agg
            .subgroup_paths(&mut ctx, &xs, &dummy_orders(&local), &mut stats)
            .unwrap();
        let base: Vec<Tensor<f64>> = base.iter().map(|v| ctx.value(*v).clone()).collect();
        for r in 1..3 {
            let rotated: Vec<Var> = (0..3).map(|j| xs[(r + j) % 3]).collect();
            let paths = agg
                .subgroup_paths(&mut ctx, &rotated, &dummy_orders(&local), &mut stats)
                .unwrap();
            for p in paths {
                let best = base
                    .iter()
                    .map(|b| b.max_abs_diff(ctx.value(p)))
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-12);
            }
        }
    }

    #[test]
    fn equal_inputs_make_every_window_equal() {
        let (agg, store) = setup(CellKind::Msru, true, 6);
        let mut ctx = Ctx::infer(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Tensor::uniform(&[4, 4, 4], 1.0, &mut rng);
        let xs: Vec<Var> = (0..4).map(|_| ctx.input(f.clone())).collect();
        let mut stats = AggregatorStats::default();
        let subs: Vec<GroupFeature> = (0..4)
            .map(|i| agg.msru_subgroup(&mut ctx, &xs[..3], i, &mut stats).unwrap())
            .collect();
        for s in &subs[1..] {
            assert_eq!(ctx.value(s.tensor), ctx.value(subs[0].tensor));
        }
        // Any ordering of equal window features yields the same group feature.
        let g1 = agg.final_group_feature(&mut ctx, &subs, &mut stats).unwrap();
        let rev: Vec<GroupFeature> = subs.iter().rev().copied().collect();
        let g2 = agg.final_group_feature(&mut ctx, &rev, &mut stats).unwrap();
        assert_eq!(ctx.value(g1.tensor), ctx.value(g2.tensor));
        let lone = agg.final_group_feature(&mut ctx, &subs[..1], &mut stats).unwrap();
        assert_eq!(lone.tensor, subs[0].tensor);
    }

    #[test]
    fn same_order_is_bit_identical() {
        let (agg, store) = setup(CellKind::Msru, true, 8);
        let run = || {
            let mut ctx = Ctx::infer(&store);
            let xs = inputs(&mut ctx, 4, 9);
            let g = agg.forward(&mut ctx, &xs, &mut AggregatorStats::default()).unwrap();
            ctx.value(g.tensor).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_groups_wrap() {
        let (agg, store) = setup(CellKind::Msru, true, 10);
        let mut ctx = Ctx::infer(&store);
        let xs = inputs(&mut ctx, 2, 11);
        let g = agg.forward(&mut ctx, &xs, &mut AggregatorStats::default()).unwrap();
        assert!(ctx.value(g.tensor).is_finite());
    }
}
