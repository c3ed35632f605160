//! Classification scoring: confusion matrices, per-class precision/recall/F1
//! with zero-denominator flags, and multi-seed architecture comparisons
//! summarized as median plus interquartile range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::preprocess::Dataset;
use crate::tensor::Tensor;

/// Traffic intensity of an episode: users per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "peak")]
    Peak,
}

impl Scenario {
    pub fn users_per_cell(self) -> u32 {
        match self {
            Scenario::Normal => 30,
            Scenario::Peak => 90,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::Peak => "peak",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Scenario::Normal),
            "peak" => Ok(Scenario::Peak),
            _ => Err(Error::Config(format!(
                "unknown scenario {s:?}, expected normal or peak"
            ))),
        }
    }
}

/// Human-readable name for a class index in a `classes`-way task.
pub fn class_label(index: usize, classes: usize) -> String {
    match (classes, index) {
        (_, 0) => "No Failure".into(),
        (2, 1) => "Fault".into(),
        (_, 1) => "EPR".into(),
        (_, 2) => "Interf".into(),
        _ => format!("class {index}"),
    }
}

/// Counts of (truth, prediction) pairs. Rows are ground truth, columns the
/// predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<ConfusionMatrix> {
        if classes == 0 {
            return Err(Error::Config("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth instances of `class` (row sum).
    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.count(class, p)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dimension(
                "confusion_merge",
                &[other.classes],
                &[self.classes],
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Rows = truth, columns = prediction, with a header row of class labels.
    pub fn csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for p in 0..self.classes {
            out.push_str(&format!(",{}", class_label(p, self.classes)));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&class_label(t, self.classes));
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.count(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

/// Index of the largest value; ties break toward the lower index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Builds a confusion matrix from flat probability rows `[n * classes]`.
pub fn confusion(probs: &[f64], targets: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    if probs.len() != targets.len() * classes {
        return Err(Error::Data(format!(
            "{} probabilities for {} targets of {} classes",
            probs.len(),
            targets.len(),
            classes
        )));
    }
    let preds: Vec<u8> = probs
        .chunks(classes)
        .map(|row| argmax_row(row) as u8)
        .collect();
    confusion_from_labels(&preds, targets, classes)
}

/// Builds a confusion matrix from already-decided class labels.
pub fn confusion_from_labels(
    preds: &[u8],
    targets: &[u8],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes)?;
    for (&p, &t) in preds.iter().zip(targets) {
        if p as usize >= classes || t as usize >= classes {
            return Err(Error::Data(format!(
                "label out of range for {classes} classes: pred {p}, truth {t}"
            )));
        }
        cm.record(t as usize, p as usize);
    }
    Ok(cm)
}

/// Precision/recall/F1 for one class. `degenerate` marks any metric whose
/// denominator was zero and was therefore reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub degenerate: bool,
}

/// Per-class and averaged scores for one evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Micro-averaged F1; for single-label classification this equals
    /// accuracy.
    pub micro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serialize metrics report: {e}")))
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scores a confusion matrix. Zero-denominator metrics come back as 0 with
/// the class flagged degenerate rather than as NaN.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let c = cm.classes;
    let mut per_class = Vec::with_capacity(c);
    let mut correct = 0u64;
    for class in 0..c {
        let tp = cm.count(class, class);
        correct += tp;
        let fp: u64 = (0..c).filter(|&t| t != class).map(|t| cm.count(t, class)).sum();
        let fn_: u64 = (0..c).filter(|&p| p != class).map(|p| cm.count(class, p)).sum();
        let mut degenerate = false;
        let precision = if tp + fp == 0 {
            degenerate = true;
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            degenerate = true;
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        if precision + recall == 0.0 {
            degenerate = true;
        }
        per_class.push(ClassMetrics {
            label: class_label(class, c),
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: cm.support(class),
            degenerate,
        });
    }
    let total = cm.total();
    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };
    MetricsReport {
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64,
        micro_f1: accuracy,
        accuracy,
        total,
        per_class,
    }
}

/// Runs the model over a dataset in eval mode and scores every station of
/// every window as one classification instance.
pub fn evaluate(
    model: &Model,
    set: &Dataset,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let classes = model.config.num_classes;
    let mut cm = ConfusionMatrix::new(classes)?;
    let n = set.n_nodes as usize;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * set.sample_numel());
        let mut targets = Vec::with_capacity(chunk.len() * n);
        for &i in chunk {
            data.extend_from_slice(set.input(i));
            targets.extend_from_slice(set.label(i));
        }
        let shape = [
            chunk.len(),
            n,
            set.window as usize,
            set.n_features as usize,
        ];
        let x = Tensor::new(&shape, data)?;
        let probs = model.predict(&x)?;
        cm.merge(&confusion(probs.data(), &targets, classes)?)?;
    }
    let report = metrics(&cm);
    Ok((cm, report))
}

/// Median and interquartile range of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub n: usize,
}

/// Quantile by linear interpolation between closest ranks on sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::Data("cannot summarize zero values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot summarize non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    Ok(MetricSummary {
        median: quantile(&sorted, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        n: sorted.len(),
    })
}

/// One trained-and-evaluated run inside a comparison. A failed run carries
/// the error text instead of metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub architecture: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Median/IQR summaries for one architecture across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSummary {
    pub architecture: String,
    pub seeds_used: Vec<u64>,
    pub macro_precision: MetricSummary,
    pub macro_recall: MetricSummary,
    pub macro_f1: MetricSummary,
    pub micro_f1: MetricSummary,
    pub per_class: Vec<ClassSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: String,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
}

/// Multi-architecture comparison for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: Scenario,
    pub architectures: Vec<ArchSummary>,
    /// Failed runs, surfaced as "ARCH seed N: error".
    pub failures: Vec<String>,
}

/// Aggregates run results (one scenario) into per-architecture medians.
/// Failed runs are excluded from the statistics and surfaced in `failures`.
pub fn compare(results: &[RunResult]) -> Result<ComparisonReport> {
    if results.is_empty() {
        return Err(Error::Data("no runs to compare".into()));
    }
    let scenario = results[0].scenario;
    if results.iter().any(|r| r.scenario != scenario) {
        return Err(Error::Data(
            "comparison mixes scenarios; aggregate one scenario at a time".into(),
        ));
    }

    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.architecture.as_str()) {
            order.push(&r.architecture);
        }
    }

    let mut architectures = Vec::new();
    let mut failures = Vec::new();
    for arch in order {
        let runs: Vec<&RunResult> = results
            .iter()
            .filter(|r| r.architecture == arch)
            .collect();
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() < 3 {
            return Err(Error::Config(format!(
                "architecture {arch} has {} distinct seeds, need at least 3",
                seeds.len()
            )));
        }
        let mut ok: Vec<(&RunResult, &MetricsReport)> = Vec::new();
        for r in &runs {
            match &r.metrics {
                Some(m) => ok.push((r, m)),
                None => failures.push(format!(
                    "{arch} seed {}: {}",
                    r.seed,
                    r.error.as_deref().unwrap_or("failed without detail")
                )),
            }
        }
        if ok.is_empty() {
            failures.push(format!("{arch}: no successful runs; excluded from table"));
            continue;
        }
        let grab = |f: &dyn Fn(&MetricsReport) -> f64| -> Result<MetricSummary> {
            summarize(&ok.iter().map(|(_, m)| f(m)).collect::<Vec<_>>())
        };
        let classes = ok[0].1.per_class.len();
        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            per_class.push(ClassSummary {
                label: ok[0].1.per_class[c].label.clone(),
                precision: grab(&|m| m.per_class[c].precision)?,
                recall: grab(&|m| m.per_class[c].recall)?,
                f1: grab(&|m| m.per_class[c].f1)?,
            });
        }
        architectures.push(ArchSummary {
            architecture: arch.to_string(),
            seeds_used: ok.iter().map(|(r, _)| r.seed).collect(),
            macro_precision: grab(&|m| m.macro_precision)?,
            macro_recall: grab(&|m| m.macro_recall)?,
            macro_f1: grab(&|m| m.macro_f1)?,
            micro_f1: grab(&|m| m.micro_f1)?,
            per_class,
        });
    }
    Ok(ComparisonReport {
        scenario,
        architectures,
        failures,
    })
}

fn render_rows(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn fmt_summary(s: &MetricSummary) -> String {
    format!("{:.2} ({:.2})", s.median, s.iqr)
}

impl ComparisonReport {
    /// Architecture-level table: macro and micro averages per architecture,
    /// median with IQR in parentheses.
    pub fn architecture_table(&self) -> String {
        let header: Vec<String> = ["Architecture", "Precision", "Recall", "F1", "Micro-F1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = self
            .architectures
            .iter()
            .map(|a| {
                vec![
                    a.architecture.clone(),
                    fmt_summary(&a.macro_precision),
                    fmt_summary(&a.macro_recall),
                    fmt_summary(&a.macro_f1),
                    fmt_summary(&a.micro_f1),
                ]
            })
            .collect();
        format!(
            "scenario: {} ({} users/cell)\n{}",
            self.scenario.as_str(),
            self.scenario.users_per_cell(),
            render_rows(&header, &rows)
        )
    }

    /// Per-failure-class table: fault classes first, healthy row last,
    /// one block per architecture.
    pub fn per_class_table(&self) -> String {
        let header: Vec<String> = ["Architecture", "Failure", "Precision", "Recall", "F1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for a in &self.architectures {
            let mut indices: Vec<usize> = (1..a.per_class.len()).collect();
            indices.push(0);
            for c in indices {
                let cls = &a.per_class[c];
                rows.push(vec![
                    a.architecture.clone(),
                    cls.label.clone(),
                    fmt_summary(&cls.precision),
                    fmt_summary(&cls.recall),
                    fmt_summary(&cls.f1),
                ]);
            }
        }
        format!(
            "scenario: {} ({} users/cell)\n{}",
            self.scenario.as_str(),
            self.scenario.users_per_cell(),
            render_rows(&header, &rows)
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serialize comparison report: {e}")))
    }
}
