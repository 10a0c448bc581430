use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-vs-rest counts per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    /// Counts for a single class given directly.
    pub fn single(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts {
            tp: vec![tp],
            fp: vec![fp],
            fn_: vec![fn_],
            tn: vec![tn],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn total(&self) -> u64 {
        self.tp[0] + self.fp[0] + self.fn_[0] + self.tn[0]
    }

    fn validate(&self) -> Result<()> {
        let k = self.tp.len();
        if k == 0 || self.fp.len() != k || self.fn_.len() != k || self.tn.len() != k {
            return Err(Error::contract("confusion counts need equal, non-empty class vectors"));
        }
        let total = self.total();
        if (0..k).any(|c| self.tp[c] + self.fp[c] + self.fn_[c] + self.tn[c] != total) {
            return Err(Error::contract("per-class confusion counts disagree on the total"));
        }
        if total == 0 {
            return Err(Error::contract("confusion counts over zero samples"));
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], n_classes: usize) -> Result<ConfusionCounts> {
    if preds.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {n_classes})")));
    }
    let n = preds.len() as u64;
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let tn = (0..n_classes).map(|c| n - tp[c] - fp[c] - fn_[c]).collect();
    Ok(ConfusionCounts { tp, fp, fn_, tn })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Zero-denominator cases that were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

impl MetricSet {
    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    pub fn from_values(v: [f64; 4]) -> Self {
        MetricSet {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            degenerate: Vec::new(),
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

fn ratio(num: u64, den: u64, what: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(what.to_owned());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR/(P+R)`, or 0 when both are 0.
pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Per-class precision and recall of `c`, with degeneracy flags.
pub fn class_precision_recall(c: &ConfusionCounts, class: usize, flags: &mut Vec<String>) -> (f64, f64) {
    let p = ratio(
        c.tp[class],
        c.tp[class] + c.fp[class],
        &format!("class {class}: precision (TP+FP=0)"),
        flags,
    );
    let r = ratio(
        c.tp[class],
        c.tp[class] + c.fn_[class],
        &format!("class {class}: recall (TP+FN=0)"),
        flags,
    );
    (p, r)
}

/// Macro-averaged precision and recall over classes, `F1 = 2P̄R̄/(P̄+R̄)` of
/// those averages. Accuracy is `(TP+TN)/N` for a single one-vs-rest class and
/// `ΣTP/N` (plain correct/total) otherwise.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricSet> {
    c.validate()?;
    let k = c.n_classes();
    let n = c.total();
    let mut flags = Vec::new();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for class in 0..k {
        let (p, r) = class_precision_recall(c, class, &mut flags);
        p_sum += p;
        r_sum += r;
    }
    let (precision, recall) = (p_sum / k as f64, r_sum / k as f64);
    if precision + recall == 0.0 {
        flags.push("f1 (P+R=0)".to_owned());
    }
    let correct = if k == 1 { c.tp[0] + c.tn[0] } else { c.tp.iter().sum() };
    Ok(MetricSet {
        accuracy: correct as f64 / n as f64,
        precision,
        recall,
        f1: harmonic(precision, recall),
        degenerate: flags,
    })
}

/// Global test average: the unweighted mean of each metric across centers.
pub fn gta(per_center: &[MetricSet]) -> Result<MetricSet> {
    if per_center.is_empty() {
        return Err(Error::contract("GTA over zero centers"));
    }
    let n = per_center.len() as f64;
    let mut sum = [0.0; 4];
    for m in per_center {
        for (s, v) in sum.iter_mut().zip(m.values()) {
            *s += v;
        }
    }
    let mut out = MetricSet::from_values(sum.map(|s| s / n));
    for (i, m) in per_center.iter().enumerate() {
        out.degenerate.extend(m.degenerate.iter().map(|f| format!("center {i}: {f}")));
    }
    Ok(out)
}

/// Mean and sample standard deviation (`n − 1`). Constant input, including a
/// single value, gives exactly that value and 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
