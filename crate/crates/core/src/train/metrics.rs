//! Confusion matrices and the metrics derived from them.
//!
//! Multi-class metrics are one-vs-rest per class: `TP = cm[c][c]`,
//! `FP` = column sum − TP, `FN` = row sum − TP, `TN` = the rest. Ratios with
//! a zero denominator are 0.

use std::fmt;

use crate::error::{invalid, Result};

/// `K × K` counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(invalid(format!("class pair ({truth}, {pred}) outside 0..{}", self.k)));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    /// One-vs-rest counts for class `c`.
    pub fn class_counts(&self, c: usize) -> ClassCounts {
        let tp = self.get(c, c);
        let fp = self.col_sum(c) - tp;
        let fn_ = self.row_sum(c) - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|j| format!("{:>6}", self.get(i, j))).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Builds the confusion matrix of `preds` against `labels`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(l, p)?;
    }
    Ok(cm)
}

/// One-vs-rest outcome counts of a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassCounts {
    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Per-class metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Summary metrics of a confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Fraction of correct predictions (trace / total).
    pub acc: f64,
    /// Mean per-class recall.
    pub avg_acc: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let counts = cm.class_counts(c);
            ClassMetrics {
                counts,
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
            }
        })
        .collect();
    let k = per_class.len().max(1) as f64;
    MetricsReport {
        acc: ratio(cm.trace(), cm.total()),
        avg_acc: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Acc      {:.4}", self.acc)?;
        writeln!(f, "Avg_Acc  {:.4}", self.avg_acc)?;
        writeln!(f, "macro-F1 {:.4}", self.macro_f1)?;
        writeln!(f, "class  precision  recall  f1")?;
        for (c, m) in self.per_class.iter().enumerate() {
            writeln!(f, "{c:>5}  {:>9.4}  {:>6.4}  {:.4}", m.precision, m.recall, m.f1)?;
        }
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 5] = ["class", "precision", "recall", "f1", "support"];

impl MetricsReport {
    /// CSV with [`METRICS_HEADER`]: one line per class, then `acc`,
    /// `avg_acc` and `macro_f1` lines with the value in the `f1` column.
    pub fn to_csv(&self, class_names: &[&str]) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        for (c, m) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).map_or_else(|| c.to_string(), |n| n.to_string());
            w.write_record([
                name,
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
                (m.counts.tp + m.counts.fn_).to_string(),
            ])?;
        }
        for (name, v) in [("acc", self.acc), ("avg_acc", self.avg_acc), ("macro_f1", self.macro_f1)] {
            w.write_record([name.to_string(), String::new(), String::new(), format!("{v:.6}"), String::new()])?;
        }
        w.into_inner().map_err(|e| invalid(format!("metrics buffer: {e}")))
    }
}
