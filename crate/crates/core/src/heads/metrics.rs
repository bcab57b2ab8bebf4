use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer confusion counts, `counts[truth * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Metrics(format!("class ({truth}, {pred}) outside 0..{}", self.classes)));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn from_pairs(classes: usize, truth: &[u16], pred: &[u16]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Metrics(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t as usize, p as usize)?;
        }
        Ok(cm)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metrics(format!("merging {} and {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(tp, fp, fn)` of class `k`.
    pub fn class_counts(&self, k: usize) -> (u64, u64, u64) {
        let n = self.classes;
        let tp = self.counts[k * n + k];
        let fp = (0..n).map(|t| self.counts[t * n + k]).sum::<u64>() - tp;
        let fneg = (0..n).map(|p| self.counts[k * n + p]).sum::<u64>() - tp;
        (tp, fp, fneg)
    }
}

/// Per-class binary counts for multilabel outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultilabelCounts {
    pub classes: usize,
    /// `(tp, fp, fn, tn)` per class.
    pub counts: Vec<(u64, u64, u64, u64)>,
}

impl MultilabelCounts {
    pub fn new(classes: usize) -> Self {
        MultilabelCounts { classes, counts: vec![(0, 0, 0, 0); classes] }
    }

    pub fn add(&mut self, truth: &[bool], pred: &[bool]) -> Result<()> {
        if truth.len() != self.classes || pred.len() != self.classes {
            return Err(Error::Metrics(format!("expected {} labels, got {} and {}", self.classes, truth.len(), pred.len())));
        }
        for (c, (&t, &p)) in self.counts.iter_mut().zip(truth.iter().zip(pred)) {
            match (t, p) {
                (true, true) => c.0 += 1,
                (false, true) => c.1 += 1,
                (true, false) => c.2 += 1,
                (false, false) => c.3 += 1,
            }
        }
        Ok(())
    }
}

/// Scores of one evaluation. Classes absent from both labels and
/// predictions are left out of the macro averages and reported as `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub overall_accuracy: f64,
    pub miou: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub support: Vec<u64>,
}

fn summarise(counts: &[(u64, u64, u64)], correct: u64, decisions: u64) -> Result<Metrics> {
    if decisions == 0 {
        return Err(Error::Metrics("empty label set".into()));
    }
    let mut f1s = Vec::with_capacity(counts.len());
    let mut ious = Vec::with_capacity(counts.len());
    let mut support = Vec::with_capacity(counts.len());
    for &(tp, fp, fneg) in counts {
        let denom = tp + fp + fneg;
        if denom == 0 {
            f1s.push(None);
            ious.push(None);
        } else {
            f1s.push(Some(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64));
            ious.push(Some(tp as f64 / denom as f64));
        }
        support.push(tp + fneg);
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    let total_support: u64 = support.iter().sum();
    let weighted_f1 = if total_support == 0 {
        0.0
    } else {
        f1s.iter().zip(&support).map(|(f, &s)| f.unwrap_or(0.0) * s as f64).sum::<f64>() / total_support as f64
    };
    Ok(Metrics {
        weighted_f1,
        macro_f1: mean(&f1s),
        overall_accuracy: correct as f64 / decisions as f64,
        miou: mean(&ious),
        per_class_f1: f1s,
        per_class_iou: ious,
        support,
    })
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics> {
    let counts: Vec<_> = (0..cm.classes).map(|k| cm.class_counts(k)).collect();
    let correct = (0..cm.classes).map(|k| cm.counts[k * cm.classes + k]).sum();
    summarise(&counts, correct, cm.total())
}

/// Overall accuracy counts every (sample, class) decision.
pub fn metrics_from_multilabel(c: &MultilabelCounts) -> Result<Metrics> {
    let counts: Vec<_> = c.counts.iter().map(|&(tp, fp, fneg, _)| (tp, fp, fneg)).collect();
    let correct = c.counts.iter().map(|&(tp, _, _, tn)| tp + tn).sum();
    let decisions = c.counts.iter().map(|&(a, b, d, e)| a + b + d + e).sum();
    summarise(&counts, correct, decisions)
}

/// Metrics of single-label predictions.
pub fn metrics(classes: usize, truth: &[u16], pred: &[u16]) -> Result<Metrics> {
    metrics_from_confusion(&ConfusionMatrix::from_pairs(classes, truth, pred)?)
}
