//! Saliency and co-segmentation metrics, computed in `f64` on `[0,1]` maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageGroup;
use crate::error::{cfg_err, contract_err, dim_err, Error, Result};
use crate::heads::SaliencyMap;

/// Weight of precision in the F-measure.
pub const BETA2: f64 = 0.3;
/// Region/object balance of the S-measure.
pub const ALPHA: f64 = 0.5;
/// Threshold turning maps into masks for `P` and `J`.
pub const COSEG_THRESHOLD: f64 = 0.5;
/// Guard used by the structure and alignment measures.
const EPS: f64 = f64::EPSILON;

/// Ground-truth mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(dim_err!("{} values for a {height}×{width} mask", values.len()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

fn check(pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(dim_err!(
            "map {}×{} vs mask {}×{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    Ok(())
}

fn check_nonempty(pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    check(pred, gt)?;
    if gt.count() == 0 {
        return Err(Error::MetricUndefined("ground truth has no foreground".into()));
    }
    Ok(())
}

/// 8-bit levels of a `[0,1]` map.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// `(precision, recall)` at thresholds `t = 0..=255`, foreground where the
/// quantized level is at least `t`.
pub fn pr_curve(pred: &SaliencyMap, gt: &BinaryMask) -> Result<Vec<(f64, f64)>> {
    check_nonempty(pred, gt)?;
    // Histograms of levels on foreground and background, then suffix sums.
    let mut fg = [0usize; 256];
    let mut bg = [0usize; 256];
    for (&q, &g) in quantize(&pred.values).iter().zip(&gt.values) {
        if g {
            fg[q as usize] += 1;
        } else {
            bg[q as usize] += 1;
        }
    }
    let positives = gt.count() as f64;
    let mut out = vec![(0.0, 0.0); 256];
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in (0..256).rev() {
        tp += fg[t];
        fp += bg[t];
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        out[t] = (precision, tp as f64 / positives);
    }
    Ok(out)
}

pub fn f_score(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FMode {
    /// Best F over the 256 thresholds.
    Max,
    /// F at threshold `μ + σ` of the map.
    Adaptive,
}

pub fn adaptive_threshold(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean + var.sqrt()).clamp(0.0, 1.0)
}

pub fn f_measure(pred: &SaliencyMap, gt: &BinaryMask, beta2: f64, mode: FMode) -> Result<f64> {
    if !(beta2 > 0.0) {
        return Err(cfg_err!("beta² must be positive, got {beta2}"));
    }
    check_nonempty(pred, gt)?;
    match mode {
        FMode::Max => Ok(pr_curve(pred, gt)?
            .iter()
            .map(|&(p, r)| f_score(p, r, beta2))
            .fold(0.0, f64::max)),
        FMode::Adaptive => {
            let t = adaptive_threshold(&pred.values);
            let q = quantize(&pred.values);
            let (mut tp, mut fp) = (0usize, 0usize);
            for (&l, &g) in q.iter().zip(&gt.values) {
                if l as f64 / 255.0 >= t {
                    if g {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            Ok(f_score(precision, tp as f64 / gt.count() as f64, beta2))
        }
    }
}

/// Mean and sample standard deviation (`n − 1`) of `xs`.
fn mean_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_sample_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| **g).map(|(p, _)| *p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| !**g).map(|(p, _)| 1.0 - *p).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Structural similarity of one region, as used by the region term.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based column/row of the foreground centroid, rounded.
fn centroid(gt: &BinaryMask) -> (usize, usize) {
    let total = gt.count() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in 0..gt.height {
        for c in 0..gt.width {
            if gt.values[r * gt.width + c] {
                sx += (c + 1) as f64;
                sy += (r + 1) as f64;
            }
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn s_region(pred: &SaliencyMap, gt: &BinaryMask) -> f64 {
    let (h, w) = (gt.height, gt.width);
    let (cx, cy) = centroid(gt);
    let g = gt.as_f64();
    let area = (h * w) as f64;
    // Quadrants: rows [0, cy) / [cy, h), columns [0, cx) / [cx, w).
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut score = 0.0;
    for (r0, r1, c0, c1) in quads {
        let n = (r1 - r0) * (c1 - c0);
        if n == 0 {
            continue;
        }
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for r in r0..r1 {
            p.extend_from_slice(&pred.values[r * w + c0..r * w + c1]);
            q.extend_from_slice(&g[r * w + c0..r * w + c1]);
        }
        score += n as f64 / area * region_ssim(&p, &q);
    }
    score
}

/// Structure measure `α·S_r + (1−α)·S_o`, floored at 0.
pub fn s_measure(pred: &SaliencyMap, gt: &BinaryMask, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(cfg_err!("alpha must lie in [0, 1], got {alpha}"));
    }
    check_nonempty(pred, gt)?;
    if gt.count() == gt.values.len() {
        return Ok(pred.values.iter().sum::<f64>() / pred.values.len() as f64);
    }
    let q = alpha * s_region(pred, gt) + (1.0 - alpha) * s_object(&pred.values, &gt.values);
    Ok(q.max(0.0))
}

/// Enhanced alignment of a binary prediction with the ground truth.
fn alignment_score(fm: &[bool], gt: &BinaryMask) -> f64 {
    let n = fm.len() as f64;
    if gt.count() == gt.values.len() {
        return fm.iter().filter(|v| **v).count() as f64 / n;
    }
    let f: Vec<f64> = fm.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let g = gt.as_f64();
    let mf = f.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    let mut total = 0.0;
    for (a, b) in f.iter().zip(&g) {
        let (pa, pb) = (a - mf, b - mg);
        let xi = 2.0 * pa * pb / (pa * pa + pb * pb + EPS);
        total += (1.0 + xi).powi(2) / 4.0;
    }
    total / n
}

/// Maximum enhanced-alignment measure over the 256 thresholds.
pub fn e_measure(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_nonempty(pred, gt)?;
    let q = quantize(&pred.values);
    let mut best: f64 = 0.0;
    for t in 0..=255u8 {
        let fm: Vec<bool> = q.iter().map(|&l| l >= t).collect();
        best = best.max(alignment_score(&fm, gt));
    }
    Ok(best)
}

pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(s / pred.values.len() as f64)
}

/// Pixel accuracy `P` and Jaccard index `J` of a binary prediction.
pub fn coseg_scores(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(dim_err!("masks of {} and {} pixels", pred.len(), gt.len()));
    }
    let (mut agree, mut inter, mut union) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        agree += (p == g) as usize;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    let j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((agree as f64 / pred.len() as f64, j))
}

/// One row of the metric table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub e_xi: f64,
    pub s_m: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub p: f64,
    pub j: f64,
}

impl MetricRow {
    pub const NAMES: [&'static str; 6] = ["E_xi", "S_m", "F_beta", "MAE", "P", "J"];

    pub fn values(&self) -> [f64; 6] {
        [self.e_xi, self.s_m, self.f_beta, self.mae, self.p, self.j]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            e_xi: v[0],
            s_m: v[1],
            f_beta: v[2],
            mae: v[3],
            p: v[4],
            j: v[5],
        }
    }

    /// Column-wise mean of `rows`.
    pub fn mean(rows: &[MetricRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(contract_err!("mean of zero metric rows"));
        }
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Ok(Self::from_values(acc.map(|a| a / rows.len() as f64)))
    }
}

/// Every metric of one map. `F_β` is the maximum F-measure.
pub fn evaluate_map(pred: &SaliencyMap, gt: &BinaryMask) -> Result<MetricRow> {
    let bin: Vec<bool> = pred.values.iter().map(|&v| v >= COSEG_THRESHOLD).collect();
    let (p, j) = coseg_scores(&bin, &gt.values)?;
    Ok(MetricRow {
        e_xi: e_measure(pred, gt)?,
        s_m: s_measure(pred, gt, ALPHA)?,
        f_beta: f_measure(pred, gt, BETA2, FMode::Max)?,
        mae: mae(pred, gt)?,
        p,
        j,
    })
}

/// Per-image rows plus their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `(group, image, metrics)`.
    pub rows: Vec<(String, String, MetricRow)>,
    pub aggregate: MetricRow,
}

impl EvaluationReport {
    pub fn from_rows(rows: Vec<(String, String, MetricRow)>) -> Result<Self> {
        let only: Vec<MetricRow> = rows.iter().map(|r| r.2).collect();
        let aggregate = MetricRow::mean(&only)?;
        Ok(Self { rows, aggregate })
    }
}

/// Anything that maps an ordered image group to per-image saliency maps.
///
/// `order[i]` is the original index of the image placed at position `i`;
/// the returned maps are indexed by original image.
pub trait GroupPredictor {
    fn predict(&self, group: &ImageGroup, order: &[usize]) -> Result<Vec<SaliencyMap>>;
}

/// Mean and population standard deviation of each metric over trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Group-mean metrics of each trial.
    pub trials: Vec<MetricRow>,
    pub orders: Vec<Vec<usize>>,
    pub mean: MetricRow,
    pub std: MetricRow,
}

/// Population mean and standard deviation, two-pass. Values are summed in
/// sorted order so the result does not depend on their order.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) {
        if lo == hi {
            return (lo, 0.0);
        }
    }
    let n = xs.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

/// `trials` seeded random orders of `0..n`.
pub fn random_orders(n: usize, trials: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect()
}

pub fn stability_report<P: GroupPredictor + ?Sized>(
    model: &P,
    group: &ImageGroup,
    trials: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if trials < 2 {
        return Err(cfg_err!("stability needs at least two trials, got {trials}"));
    }
    let orders = random_orders(group.len(), trials, seed);
    let mut rows = Vec::with_capacity(trials);
    for order in &orders {
        let maps = model.predict(group, order)?;
        let per_image = maps
            .iter()
            .zip(&group.masks)
            .map(|(m, g)| evaluate_map(m, g))
            .collect::<Result<Vec<_>>>()?;
        rows.push(MetricRow::mean(&per_image)?);
    }
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        let col: Vec<f64> = rows.iter().map(|r| r.values()[k]).collect();
        (mean[k], std[k]) = mean_std(&col);
    }
    Ok(StabilityReport {
        trials: rows,
        orders,
        mean: MetricRow::from_values(mean),
        std: MetricRow::from_values(std),
    })
}
