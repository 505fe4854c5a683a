//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{cfg_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares the backward-pass gradient of `f` against central differences
/// at every coordinate of every input. Returns the largest
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    run(&f, inputs, eps, &coords).map(|r| r.max_rel_err)
}

/// Like [`finite_diff_check`], but probes at most `per_input` seeded random
/// coordinates of each input. Used on full models where exhaustive probing
/// would need two forward passes per parameter.
pub fn finite_diff_check_sampled<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.len();
            let mut c = sample(&mut rng, n, per_input.min(n)).into_vec();
            c.sort_unstable();
            c
        })
        .collect();
    run(&f, inputs, eps, &coords)
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn run<T, F>(f: &F, inputs: &[Tensor<T>], eps: f64, coords: &[Vec<usize>]) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(cfg_err!("finite-difference step {eps} outside (0, 1e-2]"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (i, cs) in coords.iter().enumerate() {
        let analytic: Vec<f64> = match grads.raw(vars[i]) {
            Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        for &c in cs {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + T::lit(eps);
            let plus = evaluate(f, &probe)?.to_f64_lossy();
            probe[i].data_mut()[c] = orig - T::lit(eps);
            let minus = evaluate(f, &probe)?.to_f64_lossy();
            probe[i].data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[c];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, c));
                }
            }
        }
    }
    Ok(report)
}
