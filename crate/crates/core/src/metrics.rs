//! Evaluation arithmetic: one-vs-rest confusion counts and the overlap and
//! retrieval scores derived from them. Both classifier outputs and flattened
//! segmentation masks go through the same functions.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

pub fn confusion(pred: &[usize], truth: &[usize], class: usize) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion", pred.len(), truth.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    fn class_absent_everywhere(&self) -> bool {
        self.true_pos + self.false_pos + self.false_neg == 0
    }

    /// Intersection over union, TP/(TP+FP+FN). A class absent from both
    /// prediction and truth scores 1.0.
    pub fn iou(&self) -> f64 {
        if self.class_absent_everywhere() {
            return 1.0;
        }
        self.true_pos as f64 / (self.true_pos + self.false_pos + self.false_neg) as f64
    }

    /// 2TP/(2TP+FP+FN).
    pub fn dice(&self) -> f64 {
        if self.class_absent_everywhere() {
            return 1.0;
        }
        2.0 * self.true_pos as f64
            / (2 * self.true_pos + self.false_pos + self.false_neg) as f64
    }

    pub fn precision(&self) -> f64 {
        if self.class_absent_everywhere() {
            return 1.0;
        }
        if self.true_pos + self.false_pos == 0 {
            return 0.0;
        }
        self.true_pos as f64 / (self.true_pos + self.false_pos) as f64
    }

    pub fn recall(&self) -> f64 {
        if self.class_absent_everywhere() {
            return 1.0;
        }
        if self.true_pos + self.false_neg == 0 {
            return 0.0;
        }
        self.true_pos as f64 / (self.true_pos + self.false_neg) as f64
    }

    /// Harmonic mean of precision and recall; equals Dice on the same counts.
    pub fn f1(&self) -> f64 {
        if self.class_absent_everywhere() {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            return 0.0;
        }
        2.0 * p * r / (p + r)
    }

    /// (TP+TN)/total; 1.0 on empty input.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 1.0;
        }
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }
}

/// Fraction of positions where prediction and truth agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    pub support: usize,
}

/// Overall and per-class scores; the multiclass numbers macro-average over
/// every class appearing in either argument.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

pub fn report(pred: &[usize], truth: &[usize]) -> Result<MetricsSummary> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::invalid("report: empty label slices"));
    }
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    let (mut p_sum, mut r_sum, mut f_sum, mut i_sum, mut d_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &class in &classes {
        let c = confusion(pred, truth, class)?;
        let m = ClassMetrics {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            iou: c.iou(),
            dice: c.dice(),
            support: truth.iter().filter(|&&t| t == class).count(),
        };
        p_sum += m.precision;
        r_sum += m.recall;
        f_sum += m.f1;
        i_sum += m.iou;
        d_sum += m.dice;
        per_class.insert(class.to_string(), m);
    }
    let n = classes.len() as f64;
    Ok(MetricsSummary {
        accuracy: accuracy(pred, truth)?,
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
        iou: i_sum / n,
        dice: d_sum / n,
        per_class,
    })
}
