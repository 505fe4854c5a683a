//! Cyclic sliding windows over an image sequence and their rotations.

use crate::error::{cfg_err, Result};

/// Sliding-window partition of an `N`-image sequence plus the rotations run
/// on each window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderPlan {
    pub n_images: usize,
    pub window: usize,
    /// Window `i` covers positions `i, i+1, .., i+k-1` modulo `N`.
    pub subgroups: Vec<Vec<usize>>,
    /// Orders each window is run under: all `k` rotations, or just the
    /// window itself when the multi-order mechanism is off.
    pub orders_per_subgroup: Vec<Vec<Vec<usize>>>,
}

impl OrderPlan {
    /// Like [`build_subgroups`] but tolerant of `N < k`, in which case the
    /// windows wrap more than once and repeat positions. Used so that tiny
    /// groups still run through the same code path.
    pub fn new(n: usize, k: usize, multi_order: bool) -> Result<Self> {
        if n == 0 {
            return Err(cfg_err!("a group needs at least one image"));
        }
        if k < 2 {
            return Err(cfg_err!("window size must be at least 2, got {k}"));
        }
        let subgroups = cyclic_windows(n, k);
        let orders_per_subgroup = subgroups
            .iter()
            .map(|w| if multi_order { dummy_orders(w) } else { vec![w.clone()] })
            .collect();
        Ok(Self {
            n_images: n,
            window: k,
            subgroups,
            orders_per_subgroup,
        })
    }

    pub fn paths(&self) -> usize {
        self.orders_per_subgroup.iter().map(Vec::len).sum()
    }
}

fn cyclic_windows(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (0..k).map(|j| (i + j) % n).collect()).collect()
}

/// `N` stride-1 windows of size `k` over a cyclic sequence (0-based).
pub fn build_subgroups(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(cfg_err!("sub-groups need N ≥ k ≥ 2, got N={n}, k={k}"));
    }
    Ok(cyclic_windows(n, k))
}

/// All cyclic rotations of `window`, ordered by the sequence position of
/// their first element.
pub fn dummy_orders(window: &[usize]) -> Vec<Vec<usize>> {
    let k = window.len();
    let mut orders: Vec<Vec<usize>> = (0..k)
        .map(|s| (0..k).map(|j| window[(s + j) % k]).collect())
        .collect();
    orders.sort_by_key(|o| o[0]);
    orders
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn one_based(w: &[Vec<usize>]) -> Vec<Vec<usize>> {
        w.iter().map(|v| v.iter().map(|i| i + 1).collect()).collect()
    }

    #[test]
    fn four_images_wrap() {
        let w = build_subgroups(4, 3).unwrap();
        assert_eq!(
            one_based(&w),
            vec![vec![1, 2, 3], vec![2, 3, 4], vec![3, 4, 1], vec![4, 1, 2]]
        );
    }

    #[test]
    fn three_images() {
        let w = build_subgroups(3, 3).unwrap();
        assert_eq!(one_based(&w), vec![vec![1, 2, 3], vec![2, 3, 1], vec![3, 1, 2]]);
    }

    #[test]
    fn eight_images_each_index_in_three_windows() {
        let w = build_subgroups(8, 3).unwrap();
        assert_eq!(w.len(), 8);
        for idx in 0..8 {
            let mut count = 0;
            for win in &w {
                for &i in win {
                    if i == idx {
                        count += 1;
                    }
                }
            }
            assert_eq!(count, 3);
        }
    }

    #[test]
    fn too_few_images_rejected() {
        assert!(matches!(build_subgroups(2, 3), Err(crate::Error::Configuration(_))));
        assert!(build_subgroups(5, 1).is_err());
        // The plan itself wraps instead.
        let plan = OrderPlan::new(2, 3, true).unwrap();
        assert_eq!(plan.subgroups, vec![vec![0, 1, 0], vec![1, 0, 1]]);
    }

    #[test]
    fn wrap_window_orders() {
        // Window (X_N, X_1, X_2) with N = 5, 0-based (4, 0, 1).
        let orders = dummy_orders(&[4, 0, 1]);
        assert_eq!(orders, vec![vec![0, 1, 4], vec![1, 4, 0], vec![4, 0, 1]]);
    }

    #[test]
    fn distinct_indices_give_distinct_orders() {
        for w in build_subgroups(6, 3).unwrap() {
            let set: BTreeSet<_> = dummy_orders(&w).into_iter().collect();
            assert_eq!(set.len(), 3);
        }
    }

    #[test]
    fn plan_counts() {
        let plan = OrderPlan::new(8, 3, true).unwrap();
        assert_eq!(plan.paths(), 24);
        assert!(plan.orders_per_subgroup.iter().all(|o| o.len() == 3));
        let single = OrderPlan::new(8, 3, false).unwrap();
        assert_eq!(single.paths(), 8);
        assert_eq!(single.orders_per_subgroup[2], vec![vec![2, 3, 4]]);
    }

    proptest! {
        #[test]
        fn orders_invariant_under_rotation(
            w in proptest::collection::vec(0usize..50, 2..6), r in 0usize..6
        ) {
            let k = w.len();
            let rotated: Vec<usize> = (0..k).map(|j| w[(r + j) % k]).collect();
            let a: BTreeSet<_> = dummy_orders(&w).into_iter().collect();
            let b: BTreeSet<_> = dummy_orders(&rotated).into_iter().collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn windows_cover_each_index_k_times(n in 2usize..33, k in 2usize..6) {
            prop_assume!(n >= k);
            let w = build_subgroups(n, k).unwrap();
            prop_assert_eq!(w.len(), n);
            let mut counts = vec![0; n];
            for win in &w {
                prop_assert_eq!(win.len(), k);
                for &i in win { counts[i] += 1; }
            }
            prop_assert!(counts.iter().all(|&c| c == k));
        }
    }
}
