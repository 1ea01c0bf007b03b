//! Confusion matrices and the precision/recall/F1 report derived from them.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K × K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract(
                "confusion matrix rows must form a square".into(),
            ));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.classes;
        if truth >= k || pred >= k {
            return Err(Error::Contract(format!(
                "pair (label {truth}, prediction {pred}) outside {k} classes"
            )));
        }
        self.counts[truth * k + pred] += 1;
        Ok(())
    }

    /// Elementwise sum with a matrix accumulated on another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Contract(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

pub fn confuse(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub total: u64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted: Averages,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and averaged metrics. A class with no predictions (or no true
/// samples) scores precision (or recall) 0 and F1 0.
pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract(
            "cannot report on an empty confusion matrix".into(),
        ));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
            }
        })
        .collect();
    let k = per_class.len() as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
    };
    let w = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    // recall·support is TP exactly, so sum counts to avoid rounding drift
    let weighted = Averages {
        precision: w(|m| m.precision),
        recall: ratio(cm.trace(), total),
        f1: w(|m| m.f1),
    };
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        total,
        per_class,
        macro_avg,
        weighted,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn class_name(names: &[&str], c: usize) -> String {
    names
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

/// Aligned table: accuracy, precision and recall in percent, F1 as a
/// four-decimal fraction.
pub fn render_table(r: &MetricsReport, names: &[&str]) -> String {
    let rows: Vec<(String, String, String, String, String)> = r
        .per_class
        .iter()
        .enumerate()
        .map(|(c, m)| {
            (
                class_name(names, c),
                pct(m.precision),
                pct(m.recall),
                format!("{:.4}", m.f1),
                m.support.to_string(),
            )
        })
        .chain(
            [("macro", r.macro_avg), ("weighted", r.weighted)]
                .into_iter()
                .map(|(n, a)| {
                    (
                        n.to_string(),
                        pct(a.precision),
                        pct(a.recall),
                        format!("{:.4}", a.f1),
                        r.total.to_string(),
                    )
                }),
        )
        .collect();
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "accuracy: {}% ({} samples)", pct(r.accuracy), r.total);
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>7}  {:>7}",
        "class", "prec(%)", "rec(%)", "f1", "support"
    );
    for (i, (n, p, rc, f, s)) in rows.iter().enumerate() {
        if i == r.per_class.len() {
            let _ = writeln!(out, "{}", "-".repeat(width + 42));
        }
        let _ = writeln!(out, "{n:<width$}  {p:>9}  {rc:>9}  {f:>7}  {s:>7}");
    }
    out
}

/// One `key=value` pair per line with full precision.
pub fn render_kv(r: &MetricsReport, names: &[&str]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "accuracy={}", r.accuracy);
    let _ = writeln!(out, "total={}", r.total);
    for (tag, a) in [("macro", r.macro_avg), ("weighted", r.weighted)] {
        let _ = writeln!(out, "{tag}_precision={}", a.precision);
        let _ = writeln!(out, "{tag}_recall={}", a.recall);
        let _ = writeln!(out, "{tag}_f1={}", a.f1);
    }
    for (c, m) in r.per_class.iter().enumerate() {
        let key = class_name(names, c).to_lowercase().replace(' ', "_");
        let _ = writeln!(out, "class.{key}.precision={}", m.precision);
        let _ = writeln!(out, "class.{key}.recall={}", m.recall);
        let _ = writeln!(out, "class.{key}.f1={}", m.f1);
        let _ = writeln!(out, "class.{key}.support={}", m.support);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![3, 7]]).unwrap();
        let r = report(&cm).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert!((r.per_class[0].precision - 8.0 / 11.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].recall, 0.8);
        let f1 = (r.per_class[0].f1 + r.per_class[1].f1) / 2.0;
        assert_eq!(r.macro_avg.f1, f1);
    }

    #[test]
    fn confuse_small_cases() {
        let cm = confuse(&[0, 1], &[1, 1], 2).unwrap();
        assert_eq!((cm.get(1, 0), cm.get(1, 1), cm.get(0, 0)), (1, 1, 0));
        let diag = confuse(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let r = report(&diag).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_avg.f1, 1.0);
        assert!(matches!(confuse(&[3], &[0], 3), Err(Error::Contract(_))));
        assert!(confuse(&[0], &[0, 1], 3).is_err());
        assert!(report(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn empty_class_scores_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 0]]).unwrap();
        let r = report(&cm).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert_eq!(r.macro_avg.recall, 0.5);
    }

    #[test]
    fn rendering_formats() {
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![3, 7]]).unwrap();
        let r = report(&cm).unwrap();
        let t = render_table(&r, &["Healthy", "Myopia"]);
        assert!(t.contains("accuracy: 75.00%"));
        assert!(t.contains("72.73"));
        let kv = render_kv(&r, &["Healthy", "Myopia"]);
        assert!(kv.lines().any(|l| l == "accuracy=0.75"));
        assert!(kv.contains("class.healthy.recall=0.8"));
    }
}
