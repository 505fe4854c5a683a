//! Directory evaluation, in-memory evaluation, and order-stability reports.

use std::path::Path;

use cosal_core::metrics::{evaluate_map, stability_report, GroupPredictor, StabilityReport};
use cosal_core::{EvaluationReport, ImageGroup, MetricRow};
use serde::Serialize;

use crate::dataset;
use crate::error::{HarnessError, Result};
use crate::pnm;

/// Outcome of comparing a prediction tree against a ground-truth tree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirEvaluation {
    pub report: EvaluationReport,
    /// `group/image` entries with a mask but no prediction.
    pub missing: Vec<String>,
    /// `group/image` entries with a prediction but no mask.
    pub unmatched: Vec<String>,
}

impl DirEvaluation {
    pub fn complete(&self) -> bool {
        self.missing.is_empty() && self.unmatched.is_empty()
    }
}

/// Pairs every `<gt>/<group>[/gt]/<name>.pgm` with
/// `<pred>/<group>[/gt]/<name>.pgm`. Gaps are listed and skipped.
pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<DirEvaluation> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut unmatched = Vec::new();
    for group in dataset::subdirs(gt)? {
        let gdir = dataset::map_dir(gt, &group);
        let pdir = dataset::map_dir(pred, &group);
        let names = dataset::stems(&gdir, "pgm")?;
        let predicted = if pdir.is_dir() {
            dataset::stems(&pdir, "pgm")?
        } else {
            Vec::new()
        };
        for n in predicted.iter().filter(|n| !names.contains(n)) {
            unmatched.push(format!("{group}/{n}"));
        }
        for (i, n) in names.iter().enumerate() {
            if !predicted.contains(n) {
                missing.push(format!("{group}/{n}"));
                continue;
            }
            let mask = pnm::read_mask(&gdir.join(format!("{n}.pgm")))?;
            let map = pnm::read_map(&pdir.join(format!("{n}.pgm")), i)?;
            let row = evaluate_map(&map, &mask).map_err(|e| HarnessError::Data(format!("{group}/{n}: {e}")))?;
            rows.push((group.clone(), n.clone(), row));
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::Data(format!(
            "nothing to evaluate between {} and {}",
            pred.display(),
            gt.display()
        )));
    }
    Ok(DirEvaluation {
        report: EvaluationReport::from_rows(rows)?,
        missing,
        unmatched,
    })
}

fn fmt(v: f64) -> String {
    // Round-trip exact, so reruns compare byte-for-byte.
    format!("{v:?}")
}

fn row_record(group: &str, image: &str, r: &MetricRow) -> Vec<String> {
    let mut rec = vec![group.to_string(), image.to_string()];
    rec.extend(r.values().iter().map(|v| fmt(*v)));
    rec
}

/// CSV with columns `group,image,E_xi,S_m,F_beta,MAE,P,J` and a final
/// `ALL` row holding the mean of the rows above it.
pub fn write_report_csv(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["group", "image"];
    header.extend(MetricRow::NAMES);
    w.write_record(&header)?;
    for (g, i, r) in &report.rows {
        w.write_record(row_record(g, i, r))?;
    }
    w.write_record(row_record("ALL", "ALL", &report.aggregate))?;
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

/// Metrics of `model` on in-memory groups, each taken in its given order.
pub fn evaluate_groups<P: GroupPredictor + ?Sized>(model: &P, groups: &[ImageGroup]) -> Result<EvaluationReport> {
    let mut rows = Vec::new();
    for g in groups {
        let order: Vec<usize> = (0..g.len()).collect();
        let maps = model.predict(g, &order)?;
        for (i, (m, gt)) in maps.iter().zip(&g.masks).enumerate() {
            rows.push((g.id.clone(), g.names[i].clone(), evaluate_map(m, gt)?));
        }
    }
    Ok(EvaluationReport::from_rows(rows)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStability {
    pub group: String,
    pub report: StabilityReport,
}

pub fn stability<P: GroupPredictor + ?Sized>(
    model: &P,
    groups: &[ImageGroup],
    trials: usize,
    seed: u64,
) -> Result<Vec<GroupStability>> {
    groups
        .iter()
        .map(|g| {
            Ok(GroupStability {
                group: g.id.clone(),
                report: stability_report(model, g, trials, seed)?,
            })
        })
        .collect()
}

/// Rows `group,metric,mean,std` per group and metric, followed by the
/// per-trial values as `group,metric@trial<t>,value,` so the spread can be
/// recomputed from the same file.
pub fn write_stability_csv(path: &Path, results: &[GroupStability]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "metric", "mean", "std"])?;
    for gs in results {
        let (mean, std) = (gs.report.mean.values(), gs.report.std.values());
        for (k, name) in MetricRow::NAMES.iter().enumerate() {
            w.write_record([gs.group.clone(), name.to_string(), fmt(mean[k]), fmt(std[k])])?;
        }
    }
    for gs in results {
        for (t, row) in gs.report.trials.iter().enumerate() {
            for (k, name) in MetricRow::NAMES.iter().enumerate() {
                w.write_record([gs.group.clone(), format!("{name}@trial{t}"), fmt(row.values()[k]), String::new()])?;
            }
        }
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}
