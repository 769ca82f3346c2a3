//! Prediction, per-label metrics, bootstrap intervals and per-tag error analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{batch_iter, DataError, EncodedDataset, LabelSet};
use crate::model::NliModel;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("model predicts {model} classes but the data uses the {label_set} label set ({data} classes)")]
    LabelSetMismatch { model: usize, label_set: LabelSet, data: usize },
    #[error("{what} must be at least 1")]
    ZeroSize { what: &'static str },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    Level(f64),
    #[error("nothing to evaluate")]
    Empty,
    #[error("gold and predicted label vectors differ in length ({gold} vs {predicted})")]
    Length { gold: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Counts with gold labels on rows and predictions on columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[&str]) -> Self {
        let n = labels.len();
        Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(labels: &[&str], counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.len() == labels.len() && counts.iter().all(|r| r.len() == labels.len()), "square counts");
        Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            counts,
        }
    }

    pub fn from_predictions(labels: &[&str], gold: &[usize], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(AnalysisError::Length {
                gold: gold.len(),
                predicted: predicted.len(),
            });
        }
        let mut m = Self::new(labels);
        for (&g, &p) in gold.iter().zip(predicted) {
            let classes = labels.len();
            if let Some(&label) = [g, p].iter().find(|&&l| l >= classes) {
                return Err(AnalysisError::LabelRange { label, classes });
            }
            m.counts[g][p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    pub fn gold_count(&self, label: usize) -> u64 {
        self.counts[label].iter().sum()
    }

    pub fn predicted_count(&self, label: usize) -> u64 {
        self.counts.iter().map(|r| r[label]).sum()
    }

    /// Diagonal over the column sum; 0 when nothing was predicted as `label`.
    pub fn precision(&self, label: usize) -> f64 {
        ratio(self.counts[label][label], self.predicted_count(label))
    }

    /// Diagonal over the row sum; 0 when `label` never occurs.
    pub fn recall(&self, label: usize) -> f64 {
        ratio(self.counts[label][label], self.gold_count(label))
    }

    pub fn f1(&self, label: usize) -> f64 {
        f1_score(self.precision(label), self.recall(label))
    }

    pub fn render(&self) -> String {
        let w = self.labels.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut out = format!("{:<w$}", "gold\\pred");
        for l in &self.labels {
            let _ = write!(out, " {l:>w$}");
        }
        let _ = writeln!(out, " {:>w$}", "recall");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{l:<w$}");
            for c in &self.counts[i] {
                let _ = write!(out, " {c:>w$}");
            }
            let _ = writeln!(out, " {:>w$}", pct(self.recall(i)));
        }
        let _ = write!(out, "{:<w$}", "precision");
        for i in 0..self.classes() {
            let _ = write!(out, " {:>w$}", pct(self.precision(i)));
        }
        out.push('\n');
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, defined as 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Rounds a fraction to a one-decimal percentage, as reported in tables.
pub fn percent_1dp(fraction: f64) -> f64 {
    (fraction * 1000.0).round() / 10.0
}

fn pct(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_label: Vec<LabelMetrics>,
    pub confusion: ConfusionMatrix,
    pub confidence_interval: Option<(f64, f64)>,
    pub categories: Option<CategoryTable>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, mean_loss: f64) -> Self {
        let per_label = (0..confusion.classes())
            .map(|i| LabelMetrics {
                label: confusion.labels[i].clone(),
                precision: confusion.precision(i),
                recall: confusion.recall(i),
                f1: confusion.f1(i),
                support: confusion.gold_count(i),
            })
            .collect();
        Self {
            accuracy: confusion.accuracy(),
            mean_loss,
            per_label,
            confusion,
            confidence_interval: None,
            categories: None,
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("accuracy {} ({} / {})\n", pct(self.accuracy), self.confusion.correct(), self.confusion.total());
        let _ = writeln!(out, "mean loss {:.6}", self.mean_loss);
        if let Some((lo, hi)) = self.confidence_interval {
            let _ = writeln!(out, "bootstrap interval [{}, {}]", pct(lo), pct(hi));
        }
        let _ = writeln!(out, "\n{:<14} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "F1", "support");
        for m in &self.per_label {
            let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>9} {:>8}", m.label, pct(m.precision), pct(m.recall), pct(m.f1), m.support);
        }
        out.push('\n');
        out.push_str(&self.confusion.render());
        if let Some(cats) = &self.categories {
            out.push('\n');
            out.push_str(&cats.render());
        }
        out
    }
}

/// Per-example outputs of a deterministic pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    /// Cross-entropy of each example under the model.
    pub losses: Vec<f64>,
}

impl Predictions {
    /// Mean loss, summed in dataset order.
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn correct(&self, gold: &[usize]) -> Vec<bool> {
        self.predicted.iter().zip(gold).map(|(p, g)| p == g).collect()
    }

    pub fn accuracy(&self, gold: &[usize]) -> f64 {
        let hits = self.correct(gold).iter().filter(|&&c| c).count();
        hits as f64 / gold.len() as f64
    }

    /// `index<TAB>gold<TAB>predicted` lines with a header.
    pub fn to_tsv(&self, gold: &[usize], labels: &[&str]) -> String {
        let mut out = String::from("index\tgold\tpredicted\n");
        for (i, (&g, &p)) in gold.iter().zip(&self.predicted).enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{}", labels[g], labels[p]);
        }
        out
    }
}

fn check_labels(model: &NliModel, label_set: LabelSet) -> Result<()> {
    if model.config.classes != label_set.len() {
        return Err(AnalysisError::LabelSetMismatch {
            model: model.config.classes,
            label_set,
            data: label_set.len(),
        });
    }
    Ok(())
}

/// Runs the model without dropout over `data` in order.
pub fn predict(model: &NliModel, data: &EncodedDataset, batch_size: usize) -> Result<Predictions> {
    let classes = model.config.classes;
    let mut predicted = vec![0; data.len()];
    let mut losses = vec![0.0; data.len()];
    for batch in batch_iter(data, batch_size, None)? {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = model.named_tensors().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let vars = model.bind(&leaves);
        let logits = model.logits(&mut tape, &vars, &batch.premises, &batch.hypotheses, None)?;
        let logits = tape.value(logits);
        for (k, &i) in batch.indices.iter().enumerate() {
            let row = logits.row(k);
            let label = batch.labels[k];
            if label >= classes {
                return Err(AnalysisError::LabelRange { label, classes });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            losses[i] = lse - row[label];
            // first maximum wins ties
            predicted[i] = row.iter().enumerate().fold(0, |best, (j, &z)| if z > row[best] { j } else { best });
        }
    }
    Ok(Predictions { predicted, losses })
}

/// Confusion matrix, per-label metrics and mean loss of `model` on `data`.
pub fn evaluate(model: &NliModel, data: &EncodedDataset, label_set: LabelSet, batch_size: usize) -> Result<(EvalReport, Predictions)> {
    check_labels(model, label_set)?;
    if data.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let preds = predict(model, data, batch_size)?;
    let confusion = ConfusionMatrix::from_predictions(label_set.names(), &data.labels, &preds.predicted)?;
    Ok((EvalReport::from_confusion(confusion, preds.mean_loss()), preds))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapSpec {
    pub samples: usize,
    pub sample_size: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            samples: 1000,
            sample_size: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Percentile bootstrap interval for accuracy: `samples` resamples of
/// `sample_size` draws with replacement.
pub fn bootstrap_ci(correct: &[bool], spec: &BootstrapSpec) -> Result<(f64, f64)> {
    if correct.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if spec.sample_size == 0 {
        return Err(AnalysisError::ZeroSize { what: "bootstrap sample size" });
    }
    if spec.samples == 0 {
        return Err(AnalysisError::ZeroSize { what: "bootstrap sample count" });
    }
    if !(spec.level > 0.0 && spec.level < 1.0) {
        return Err(AnalysisError::Level(spec.level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stats: Vec<f64> = (0..spec.samples)
        .map(|_| {
            let hits = (0..spec.sample_size).filter(|_| correct[rng.gen_range(0..correct.len())]).count();
            hits as f64 / spec.sample_size as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - spec.level) / 2.0;
    Ok((quantile(&stats, tail), quantile(&stats, 1.0 - tail)))
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub correct: u64,
    pub total: u64,
}

impl Cell {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryRow {
    pub tag: String,
    /// Examples carrying the tag.
    pub examples: u64,
    /// One cell per gold label.
    pub cells: Vec<Cell>,
}

/// Accuracy per annotation tag and gold label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryTable {
    pub labels: Vec<String>,
    pub rows: Vec<CategoryRow>,
}

impl CategoryTable {
    /// Pooled over every (tag, example) incidence with that gold label.
    pub fn micro_total(&self, label: usize) -> Option<f64> {
        let pooled = self.rows.iter().fold(Cell::default(), |acc, r| Cell {
            correct: acc.correct + r.cells[label].correct,
            total: acc.total + r.cells[label].total,
        });
        pooled.accuracy()
    }

    /// Unweighted mean over the tags that have examples with that gold label.
    pub fn macro_total(&self, label: usize) -> Option<f64> {
        let accs: Vec<f64> = self.rows.iter().filter_map(|r| r.cells[label].accuracy()).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn render(&self) -> String {
        let cell = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |a| format!("{:.1}", a * 100.0));
        let w = self.rows.iter().map(|r| r.tag.len() + 6).max().unwrap_or(0).max(14);
        let mut out = format!("{:<w$}", "tag (pairs)");
        for l in &self.labels {
            let _ = write!(out, " {l:>13}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<w$}", format!("{} ({})", r.tag, r.examples));
            for c in &r.cells {
                let _ = write!(out, " {:>13}", cell(c.accuracy()));
            }
            out.push('\n');
        }
        for (name, f) in [("total (micro)", Self::micro_total as fn(&Self, usize) -> Option<f64>), ("total (macro)", Self::macro_total)] {
            let _ = write!(out, "{name:<w$}");
            for i in 0..self.labels.len() {
                let _ = write!(out, " {:>13}", cell(f(self, i)));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the tag × gold-label table; an example with several tags counts once under each.
pub fn category_breakdown(labels: &[&str], gold: &[usize], predicted: &[usize], annotations: &[Vec<String>]) -> Result<CategoryTable> {
    if gold.len() != predicted.len() || gold.len() != annotations.len() {
        return Err(AnalysisError::Length {
            gold: gold.len(),
            predicted: predicted.len().min(annotations.len()),
        });
    }
    let mut rows: BTreeMap<&str, CategoryRow> = BTreeMap::new();
    for ((&g, &p), tags) in gold.iter().zip(predicted).zip(annotations) {
        if g >= labels.len() {
            return Err(AnalysisError::LabelRange { label: g, classes: labels.len() });
        }
        let mut tags: Vec<&str> = tags.iter().map(String::as_str).collect();
        tags.sort_unstable();
        tags.dedup();
        for tag in tags {
            let row = rows.entry(tag).or_insert_with(|| CategoryRow {
                tag: tag.to_string(),
                examples: 0,
                cells: vec![Cell::default(); labels.len()],
            });
            row.examples += 1;
            row.cells[g].total += 1;
            row.cells[g].correct += u64::from(g == p);
        }
    }
    Ok(CategoryTable {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        rows: rows.into_values().collect(),
    })
}
