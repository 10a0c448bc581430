use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Step precision-recall curve of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` at each distinct threshold, from the highest
    /// score down. Recall is non-decreasing along the list.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// One-vs-rest curve: every distinct score is a threshold (`score ≥ t`
/// predicts positive), tied scores enter together, and
/// `AP = Σ (R_k − R_{k−1}) P_k` with `R_0 = 0`.
///
/// Returns `None` when there is no positive instance.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Result<Option<PrCurve>> {
    if scores.len() != positive.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("PR curve scores must be finite"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut points, mut ap, mut prev_recall) = (Vec::new(), 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            tp += positive[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(Some(PrCurve { points, ap }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrReport {
    /// `None` for classes absent from the truth labels.
    pub per_class: Vec<Option<PrCurve>>,
    /// Mean AP over the classes that have a curve.
    pub macro_ap: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<usize>,
}

impl PrReport {
    /// Plain-text `recall precision` lines per class, separated by a
    /// `# class k  AP a` header, for external plotting.
    pub fn to_points_text(&self) -> String {
        let mut out = String::new();
        for (k, curve) in self.per_class.iter().enumerate() {
            match curve {
                Some(c) => {
                    out += &format!("# class {k}  AP {:.6}\n", c.ap);
                    for (r, p) in &c.points {
                        out += &format!("{r:.6} {p:.6}\n");
                    }
                }
                None => out += &format!("# class {k}  absent\n"),
            }
            out += "\n";
        }
        out
    }
}

/// One-vs-rest curves for every column of an `(n, n_classes)` score matrix.
pub fn pr_curve_ap(scores: &Tensor, truth: &[usize]) -> Result<PrReport> {
    let (n, k) = scores
        .dims2()
        .ok_or_else(|| Error::contract("PR scores must be an (n, n_classes) matrix"))?;
    if n != truth.len() {
        return Err(Error::contract(format!("{n} score rows for {} labels", truth.len())));
    }
    let mut report = PrReport::default();
    let (mut ap_sum, mut counted) = (0.0, 0usize);
    for class in 0..k {
        let column: Vec<f64> = (0..n).map(|i| scores.row(i)[class]).collect();
        let positive: Vec<bool> = truth.iter().map(|&y| y == class).collect();
        let curve = pr_curve(&column, &positive)?;
        match &curve {
            Some(c) => {
                ap_sum += c.ap;
                counted += 1;
            }
            None => report.excluded.push(class),
        }
        report.per_class.push(curve);
    }
    report.macro_ap = if counted > 0 { ap_sum / counted as f64 } else { 0.0 };
    Ok(report)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits
        .dims2()
        .ok_or_else(|| Error::contract("softmax needs a matrix"))?;
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        data.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(vec![n, k], data)
}
