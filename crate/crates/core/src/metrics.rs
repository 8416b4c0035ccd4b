//! Confusion matrix, per-class F1 and overall accuracy.

use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::Path;

use crate::error::{Error, Result};

/// `counts[t][p]`: pixels of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("ConfusionMatrix", &[counts.len()], &[classes, classes]));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Accumulates a prediction/label pair of equal length.
    pub fn update(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape("ConfusionMatrix::update", &[truth.len()], &[pred.len()]));
        }
        let k = self.classes;
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= k || p >= k {
                return Err(Error::invalid(format!("class id {} out of range [0, {k})", t.max(p))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn false_positives(&self, k: usize) -> u64 {
        (0..self.classes).filter(|&t| t != k).map(|t| self.get(t, k)).sum()
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        (0..self.classes).filter(|&p| p != k).map(|p| self.get(k, p)).sum()
    }

    pub fn true_negatives(&self, k: usize) -> u64 {
        self.total() - self.true_positives(k) - self.false_positives(k) - self.false_negatives(k)
    }

    /// Pixels whose true class is `k`.
    pub fn support(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        assert_eq!(self.classes, rhs.classes, "merging confusion matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
    }
}

/// F1 of one class and whether it was undefined (no support and no
/// predictions), in which case the score is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassF1 {
    pub value: f64,
    pub undefined: bool,
}

/// `2TP / (2TP + FP + FN)`.
pub fn f1_score(cm: &ConfusionMatrix, k: usize) -> ClassF1 {
    let tp = cm.true_positives(k);
    let denom = 2 * tp + cm.false_positives(k) + cm.false_negatives(k);
    if denom == 0 {
        return ClassF1 {
            value: 0.0,
            undefined: true,
        };
    }
    ClassF1 {
        value: (2 * tp) as f64 / denom as f64,
        undefined: false,
    }
}

/// `trace / total`.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("overall accuracy of an empty confusion matrix"));
    }
    let trace: u64 = (0..cm.classes()).map(|k| cm.get(k, k)).sum();
    Ok(trace as f64 / total as f64)
}

/// Unweighted mean of per-class F1.
pub fn mean_f1(cm: &ConfusionMatrix) -> f64 {
    let k = cm.classes();
    (0..k).map(|c| f1_score(cm, c).value).sum::<f64>() / k as f64
}

/// Summary of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class_f1: Vec<ClassF1>,
    pub mean_f1: f64,
    pub overall_accuracy: f64,
    pub support: Vec<u64>,
    pub total: u64,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let k = cm.classes();
        Ok(Self {
            per_class_f1: (0..k).map(|c| f1_score(cm, c)).collect(),
            mean_f1: mean_f1(cm),
            overall_accuracy: overall_accuracy(cm)?,
            support: (0..k).map(|c| cm.support(c)).collect(),
            total: cm.total(),
        })
    }

    /// Rows `metric,class,value`; `class` is empty for aggregates.
    pub fn write_csv(&self, out: impl Write, class_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "class", "value"])?;
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
        for (k, f) in self.per_class_f1.iter().enumerate() {
            w.write_record(["f1", &name(k), &format!("{}", f.value)])?;
        }
        for (k, s) in self.support.iter().enumerate() {
            w.write_record(["pixels", &name(k), &s.to_string()])?;
        }
        w.write_record(["mean_f1", "", &format!("{}", self.mean_f1)])?;
        w.write_record(["overall_accuracy", "", &format!("{}", self.overall_accuracy)])?;
        w.write_record(["total_pixels", "", &self.total.to_string()])?;
        w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f), class_names)
    }
}
