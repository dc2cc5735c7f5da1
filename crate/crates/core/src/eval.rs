//! Segmentation metrics and the reporting protocol built on them: pooled
//! confusion matrices, IoU and accuracy, per-set aggregation, learning-rate
//! sweep selection, per-class deltas between two fine-tuned models, and the
//! step at which a run peaked.
//!
//! Per-class IoU is undefined when a class never appears in truth or
//! prediction; undefined classes are excluded from means rather than counted
//! as zero, and every report that averages says so in its footer.

use std::path::Path;

use ndarray::Array2;

use crate::datamodel::{LabelMap, IGNORE_INDEX};
use crate::{Error, Result};

/// Sweep grid from coarse to fine; selection prefers the smaller rate on
/// ties.
pub const SWEEP_LRS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// Rows are truth, columns prediction.
    counts: Array2<u64>,
    pub num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<ConfusionMatrix> {
        if num_classes == 0 {
            return Err(Error::Config("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            num_classes,
        })
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth, pred)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one image's pixels. Truth pixels at the ignore label are skipped;
    /// any other out-of-range label is an error.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.classes.dim() != truth.classes.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs truth {:?}",
                pred.classes.dim(),
                truth.classes.dim()
            )));
        }
        for (&p, &t) in pred.classes.iter().zip(truth.classes.iter()) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= self.num_classes || p >= self.num_classes {
                return Err(Error::Validation(format!(
                    "label pair ({t}, {p}) outside {} classes",
                    self.num_classes
                )));
            }
            self.counts[(t, p)] += 1;
        }
        Ok(())
    }

    /// Merge another matrix in; accumulation order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}x{} into {}x{} matrix",
                other.num_classes, other.num_classes, self.num_classes, self.num_classes
            )));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// Intersection over union for one class; `None` when the class appears
    /// in neither truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[(class, class)];
        let fp: u64 = (0..self.num_classes)
            .filter(|&t| t != class)
            .map(|t| self.counts[(t, class)])
            .sum();
        let fneg: u64 = (0..self.num_classes)
            .filter(|&p| p != class)
            .map(|p| self.counts[(class, p)])
            .sum();
        let denom = tp + fp + fneg;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean over classes whose IoU is defined; `None` when none are.
    pub fn mean_iou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Validation("confusion matrix is empty".into()));
        }
        let trace: u64 = (0..self.num_classes).map(|c| self.counts[(c, c)]).sum();
        Ok(trace as f64 / total as f64)
    }
}

// ---- aggregation ----

/// Mean and sample standard deviation (n-1). Std is absent for one value.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::Validation("nothing to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Some(var.sqrt())))
}

/// "61.23 ± 0.45" on the percent scale, matching the result tables.
pub fn format_metric(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.2} ± {:.2}", mean * 100.0, s * 100.0),
        None => format!("{:.2}", mean * 100.0),
    }
}

// ---- learning-rate sweep selection ----

/// Choose the best rate from (lr, validation metric) outcomes. `None`
/// metrics mean the run diverged. Ties go to the smaller rate.
pub fn pick_sweep_lr(outcomes: &[(f64, Option<f64>)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    let mut sorted: Vec<&(f64, Option<f64>)> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &&(lr, metric) in &sorted {
        let Some(m) = metric else { continue };
        if !m.is_finite() {
            continue;
        }
        match best {
            Some((_, bm)) if m <= bm => {}
            _ => best = Some((lr, m)),
        }
    }
    best.map(|(lr, _)| lr)
        .ok_or_else(|| Error::Validation("every sweep run diverged".into()))
}

// ---- run results ----

/// One fine-tuning outcome, keyed the way the aggregation tables need.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub init: String,
    pub fraction: f64,
    pub set_index: usize,
    pub metric: String,
    pub value: f64,
    pub peak_step: u64,
}

/// Metric names a RunResult may carry; per-class entries look like
/// "per_class_iou[3]".
fn parse_metric_name(name: &str) -> Result<Option<usize>> {
    match name {
        "mean_iou" | "water_iou" | "overall_accuracy" => Ok(None),
        _ => {
            if let Some(inner) = name.strip_prefix("per_class_iou[").and_then(|s| s.strip_suffix(']'))
            {
                let c: usize = inner
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad metric name {name:?}")))?;
                return Ok(Some(c));
            }
            Err(Error::Validation(format!("unknown metric name {name:?}")))
        }
    }
}

impl RunResult {
    pub fn validate(&self) -> Result<()> {
        parse_metric_name(&self.metric)?;
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Validation(format!(
                "fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        if !self.value.is_finite() {
            return Err(Error::Validation(format!("metric value {} not finite", self.value)));
        }
        Ok(())
    }

    /// The class index for per-class metrics, `None` otherwise.
    pub fn class_index(&self) -> Option<usize> {
        parse_metric_name(&self.metric).ok().flatten()
    }
}

const RESULT_MAGIC: &str = "twinsat-results v1";

pub fn write_results(results: &[RunResult], path: &Path) -> Result<()> {
    let mut out = String::from(RESULT_MAGIC);
    out.push('\n');
    for r in results {
        r.validate()?;
        out.push_str(&format!(
            "dataset={} init={} fraction={} set={} metric={} value={} peak_step={}\n",
            r.dataset, r.init, r.fraction, r.set_index, r.metric, r.value, r.peak_step
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(RESULT_MAGIC) => {}
        other => {
            return Err(Error::parse(path, format!("expected {RESULT_MAGIC:?}, found {other:?}")))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut r = RunResult {
            dataset: String::new(),
            init: String::new(),
            fraction: f64::NAN,
            set_index: usize::MAX,
            metric: String::new(),
            value: f64::NAN,
            peak_step: 0,
        };
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad token {tok:?}")))?;
            let num = || -> Result<f64> {
                v.parse().map_err(|_| Error::parse(path, format!("bad number {v:?} for {k}")))
            };
            match k {
                "dataset" => r.dataset = v.into(),
                "init" => r.init = v.into(),
                "fraction" => r.fraction = num()?,
                "set" => {
                    r.set_index = v
                        .parse()
                        .map_err(|_| Error::parse(path, format!("bad set index {v:?}")))?
                }
                "metric" => r.metric = v.into(),
                "value" => r.value = num()?,
                "peak_step" => {
                    r.peak_step = v
                        .parse()
                        .map_err(|_| Error::parse(path, format!("bad peak step {v:?}")))?
                }
                other => return Err(Error::parse(path, format!("unknown result key {other:?}"))),
            }
        }
        r.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

// ---- per-class deltas ----

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDelta {
    pub class: usize,
    pub mean_delta: f64,
    pub n_sets: usize,
}

/// Per-class mean over set indices of (IoU_a - IoU_b). Both sides must
/// cover exactly the same (class, set) cells.
pub fn per_class_delta(a: &[RunResult], b: &[RunResult]) -> Result<Vec<ClassDelta>> {
    use std::collections::BTreeMap;
    let collect = |rs: &[RunResult]| -> Result<BTreeMap<(usize, usize), f64>> {
        let mut m = BTreeMap::new();
        for r in rs {
            let Some(c) = r.class_index() else { continue };
            if m.insert((c, r.set_index), r.value).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate per-class result for class {c} set {}",
                    r.set_index
                )));
            }
        }
        Ok(m)
    };
    let ma = collect(a)?;
    let mb = collect(b)?;
    if ma.is_empty() {
        return Err(Error::Validation("no per-class results to compare".into()));
    }
    if ma.keys().ne(mb.keys()) {
        return Err(Error::Validation(
            "result sets cover different (class, set) cells".into(),
        ));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&(c, set), &va) in &ma {
        let e = sums.entry(c).or_insert((0.0, 0));
        e.0 += va - mb[&(c, set)];
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class, (sum, n))| ClassDelta { class, mean_delta: sum / n as f64, n_sets: n })
        .collect())
}

pub fn write_class_deltas(deltas: &[ClassDelta], path: &Path) -> Result<()> {
    let mut out = String::from("class\tmean_iou_delta\tn_sets\n");
    for d in deltas {
        out.push_str(&format!("{}\t{}\t{}\n", d.class, d.mean_delta, d.n_sets));
    }
    out.push_str("# delta = mean over sets of IoU_a - IoU_b; undefined IoU cells were excluded upstream\n");
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- steps to peak ----

/// Earliest step achieving the series maximum.
pub fn steps_to_peak(series: &[(u64, f64)]) -> Result<u64> {
    if series.is_empty() {
        return Err(Error::Validation("empty metric series".into()));
    }
    let mut best_step = series[0].0;
    let mut best = series[0].1;
    for &(step, v) in &series[1..] {
        if v > best {
            best = v;
            best_step = step;
        }
    }
    Ok(best_step)
}

// ---- result table ----

/// One line of the aggregate table: an init/lr row with per-fraction cells.
pub struct TableRow {
    pub init: String,
    pub lr: f64,
    /// (fraction, mean, std over sets).
    pub cells: Vec<(f64, f64, Option<f64>)>,
}

pub fn write_results_table(rows: &[TableRow], metric: &str, path: &Path) -> Result<()> {
    let mut out = format!("# metric: {metric}; cells are mean ± sample std over split sets, percent\n");
    out.push_str("# undefined per-class IoU values are excluded from means rather than counted as zero\n");
    let mut fractions: Vec<f64> = Vec::new();
    for row in rows {
        for &(f, _, _) in &row.cells {
            if !fractions.iter().any(|&x| x == f) {
                fractions.push(f);
            }
        }
    }
    fractions.sort_by(f64::total_cmp);
    out.push_str("init\tlr");
    for f in &fractions {
        out.push_str(&format!("\t{}%", f * 100.0));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{}\t{}", row.init, row.lr));
        for f in &fractions {
            match row.cells.iter().find(|(cf, _, _)| cf == f) {
                Some(&(_, m, s)) => out.push_str(&format!("\t{}", format_metric(m, s))),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
