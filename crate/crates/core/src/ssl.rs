//! Multi-task self-supervised pretraining on pooled pseudo images.
//!
//! One shared encoder feeds a source-center classifier (cross-entropy over
//! center ids) and a restoration head that undoes patch swaps (per-sample
//! squared error). The two losses are added with equal weight and trained with
//! a single backward pass per batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, Bound, ModelSpec, ModelWeights};
use crate::numerics::{sgd_step, Graph, NodeId, Tensor};
use crate::rng;
use crate::synthdata::{corrupt, PseudoSample};

/// Which pretext losses drive the gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pretext {
    #[default]
    Both,
    /// Source-center classification only.
    Ce,
    /// Restoration only.
    Mse,
}

impl Pretext {
    pub fn as_str(self) -> &'static str {
        match self {
            Pretext::Both => "both",
            Pretext::Ce => "ce",
            Pretext::Mse => "mse",
        }
    }
}

impl std::str::FromStr for Pretext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Pretext::Both),
            "ce" => Ok(Pretext::Ce),
            "mse" => Ok(Pretext::Mse),
            other => Err(Error::contract(format!("unknown pretext `{other}` (ce|mse|both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub grid: usize,
    pub k_swaps: usize,
    pub pretext: Pretext,
    /// Fraction of each center's pseudo images held out for accuracy.
    pub holdout_fraction: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epochs: 20,
            lr: 0.001,
            batch: 4,
            grid: 4,
            k_swaps: 4,
            pretext: Pretext::Both,
            holdout_fraction: 0.2,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.grid == 0 {
            return Err(Error::contract("ssl: lr > 0, batch ≥ 1 and grid ≥ 1 are required"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::contract("ssl: holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Corrupted inputs, their clean targets and source-center labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SslBatch {
    pub corrupted: Tensor,
    pub targets: Tensor,
    pub center_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_mse: f64,
    /// Always `l_ce + l_mse`.
    pub l_ssl: f64,
    pub holdout_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SslReport {
    pub epochs: Vec<EpochRecord>,
}

impl SslReport {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    what: "ssl report",
                    detail: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SslReport { epochs })
    }
}

/// `−(1/N) Σᵢ log Pᵢ,yᵢ` from row-wise log-probabilities, with probabilities
/// clamped at 1e-12.
pub fn ce_loss(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (_, m) = log_probs
        .dims2()
        .ok_or_else(|| Error::contract("ce_loss needs a batch × classes matrix"))?;
    for (i, row) in log_probs.data().chunks_exact(m).enumerate() {
        let mass: f64 = row.iter().map(|v| v.exp()).sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "row {i} of log-probabilities sums to {mass} after exp"
            )));
        }
    }
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let loss = g.nll(lp, labels)?;
    g.value(loss).item()
}

/// `(1/N) Σᵢ ‖restoredᵢ − targetᵢ‖²`, the squared norm summed over every pixel
/// of a sample and `N` the batch size.
pub fn mse_loss(restored: &Tensor, targets: &Tensor) -> Result<f64> {
    if restored.shape() != targets.shape() || restored.rank() == 0 {
        return Err(Error::Shape {
            node: 0,
            op: "mse_loss",
            detail: format!("{:?} vs {:?}", restored.shape(), targets.shape()),
        });
    }
    let mut g = Graph::new();
    let r = g.constant(restored.clone());
    let t = g.constant(targets.clone());
    let loss = mse_node(&mut g, r, t)?;
    g.value(loss).item()
}

/// Equal-weight sum of the two pretext losses.
pub fn ssl_loss(ce: f64, mse: f64) -> f64 {
    ce + mse
}

pub(crate) fn mse_node(g: &mut Graph, restored: NodeId, targets: NodeId) -> Result<NodeId> {
    let n = g.shape(restored)[0];
    let diff = g.sub(restored, targets)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / n as f64)
}

struct Pool {
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

/// Splits each center's images into train and held-out pools, labelling them
/// by the rank of their center id.
fn split_pools(
    pseudo_sets: &[Vec<PseudoSample>],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Pool, Pool, usize)> {
    let mut ids: Vec<u32> = pseudo_sets
        .iter()
        .flat_map(|s| s.iter().map(|p| p.center_id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::contract(format!(
            "source-center classification is degenerate with {} center(s); need at least 2",
            ids.len()
        )));
    }
    let mut train = Pool {
        images: Vec::new(),
        labels: Vec::new(),
    };
    let mut holdout = Pool {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for set in pseudo_sets {
        let Some(first) = set.first() else { continue };
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT, first.center_id as u64]));
        let n_hold = (set.len() as f64 * holdout_fraction).round() as usize;
        for (rank, &i) in order.iter().enumerate() {
            let p = &set[i];
            let label = ids.binary_search(&p.center_id).unwrap();
            let pool = if rank < n_hold { &mut holdout } else { &mut train };
            pool.images.push(p.image.clone());
            pool.labels.push(label);
        }
    }
    if train.images.is_empty() {
        return Err(Error::contract("no pseudo images left for training"));
    }
    Ok((train, holdout, ids.len()))
}

fn make_batch(
    pool: &Pool,
    indices: &[usize],
    cfg: &SslConfig,
    seed_of: impl Fn(usize) -> u64,
) -> Result<SslBatch> {
    let corrupted = indices
        .iter()
        .map(|&i| corrupt(&pool.images[i], cfg.grid, cfg.k_swaps, seed_of(i)))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<&Tensor> = indices.iter().map(|&i| &pool.images[i]).collect();
    Ok(SslBatch {
        corrupted: Tensor::stack(&corrupted.iter().collect::<Vec<_>>())?,
        targets: Tensor::stack(&targets)?,
        center_labels: indices.iter().map(|&i| pool.labels[i]).collect(),
    })
}

/// The joint pretext graph of one batch with handles to both losses.
pub struct SslGraph {
    pub graph: Graph,
    pub ce: NodeId,
    pub mse: NodeId,
    /// The loss `pretext` selects; the one that is differentiated.
    pub loss: NodeId,
}

/// Builds `L_CE` (source center from the corrupted input), `L_MSE`
/// (restoration of the clean target) and the selected training loss.
pub fn ssl_graph(
    spec: &ModelSpec,
    weights: &ModelWeights,
    batch: &SslBatch,
    pretext: Pretext,
) -> Result<SslGraph> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, weights, true)?;
    let x = models::input_node(&mut g, spec, &batch.corrupted)?;
    let rep = models::encode_node(&mut g, spec, &bound, x)?;
    let logits = models::center_classify_node(&mut g, spec, &bound, rep)?;
    let log_probs = g.log_softmax(logits)?;
    let ce = g.nll(log_probs, &batch.center_labels)?;
    let restored = models::restore_node(&mut g, spec, &bound, rep)?;
    let n = batch.targets.shape()[0];
    let target = g.constant(Tensor::from_parts(
        vec![n, spec.input_len()],
        batch.targets.data().to_vec(),
    ));
    let mse = mse_node(&mut g, restored, target)?;
    let loss = match pretext {
        Pretext::Both => g.add(ce, mse)?,
        Pretext::Ce => ce,
        Pretext::Mse => mse,
    };
    Ok(SslGraph { graph: g, ce, mse, loss })
}

struct StepOutcome {
    ce: f64,
    mse: f64,
    weights: ModelWeights,
}

/// Both pretext losses on one batch, and one SGD step on the selected ones.
fn train_step(
    spec: &ModelSpec,
    weights: &ModelWeights,
    batch: &SslBatch,
    cfg: &SslConfig,
) -> Result<StepOutcome> {
    let sg = ssl_graph(spec, weights, batch, cfg.pretext)?;
    let g = &sg.graph;
    let grads = g.backward(sg.loss)?;
    Ok(StepOutcome {
        ce: g.value(sg.ce).item()?,
        mse: g.value(sg.mse).item()?,
        weights: ModelWeights::from_params(sgd_step(weights.params(), &grads, cfg.lr)?),
    })
}

/// Fraction of held-out pseudo images whose source center is predicted
/// correctly from their corrupted version.
fn holdout_accuracy(
    spec: &ModelSpec,
    weights: &ModelWeights,
    holdout: &Pool,
    cfg: &SslConfig,
    seed: u64,
) -> Result<f64> {
    if holdout.images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let indices: Vec<usize> = (0..holdout.images.len()).collect();
    for chunk in indices.chunks(64) {
        let batch = make_batch(holdout, chunk, cfg, |i| {
            rng::derive(seed, &[rng::tag::SSL, rng::tag::CORRUPT, u64::MAX, i as u64])
        })?;
        let rep = models::encode(spec, &batch.corrupted, weights)?;
        let logits = models::center_classify(spec, &rep, weights)?;
        correct += models::argmax_rows(&logits)
            .iter()
            .zip(&batch.center_labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / holdout.images.len() as f64)
}

/// Pretrains an encoder on the pooled pseudo images of every center.
///
/// Returns weights for all segments (those not reachable from the pretext
/// losses are left at their initial values) and one record per epoch.
pub fn pretrain(
    pseudo_sets: &[Vec<PseudoSample>],
    spec: &ModelSpec,
    cfg: &SslConfig,
    seed: u64,
) -> Result<(ModelWeights, SslReport)> {
    cfg.validate()?;
    let (train, holdout, n_centers) = split_pools(pseudo_sets, cfg.holdout_fraction, seed)?;
    if n_centers != spec.n_centers {
        return Err(Error::contract(format!(
            "model expects {} centers, pseudo data has {n_centers}",
            spec.n_centers
        )));
    }
    let mut weights = models::init_weights(spec, seed)?;
    let mut report = SslReport::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.images.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SSL, rng::tag::SHUFFLE, epoch as u64]));
        let (mut ce_sum, mut mse_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let batch = make_batch(&train, chunk, cfg, |i| {
                rng::derive(seed, &[rng::tag::SSL, rng::tag::CORRUPT, epoch as u64, i as u64])
            })?;
            let step = train_step(spec, &weights, &batch, cfg)?;
            ce_sum += step.ce * chunk.len() as f64;
            mse_sum += step.mse * chunk.len() as f64;
            weights = step.weights;
        }
        let n = train.images.len() as f64;
        let (l_ce, l_mse) = (ce_sum / n, mse_sum / n);
        let holdout_acc = holdout_accuracy(spec, &weights, &holdout, cfg, seed)?;
        log::debug!("ssl epoch {epoch}: ce {l_ce:.4} mse {l_mse:.4} holdout {holdout_acc:.3}");
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            l_ce,
            l_mse,
            l_ssl: ssl_loss(l_ce, l_mse),
            holdout_acc,
        });
    }
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Segment;
    use crate::numerics::{finite_diff_grad, max_relative_error, ParamSet};
    use rand::Rng;

    #[test]
    fn ce_reference_values() {
        let one_hot = Tensor::matrix(&[&[0.0, -800.0, -800.0]]);
        assert!(ce_loss(&one_hot, &[0]).unwrap() <= 1e-11);
        let uniform = Tensor::full(vec![2, 4], 0.25f64.ln());
        assert!((ce_loss(&uniform, &[1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = Tensor::matrix(&[&[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]]);
        assert!((ce_loss(&p, &[0]).unwrap() - 0.356675).abs() < 1e-6);
    }

    #[test]
    fn ce_contracts() {
        let p = Tensor::matrix(&[&[0.5f64.ln(), 0.5f64.ln()]]);
        assert!(ce_loss(&p, &[2]).is_err());
        let bad = Tensor::matrix(&[&[0.0, 0.0]]);
        assert!(ce_loss(&bad, &[0]).is_err());
    }

    #[test]
    fn mse_reference_values() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let r = Tensor::new(vec![1, 1, 2, 2], vec![1.1, -0.8, 0.3, 0.4]).unwrap();
        assert!((mse_loss(&r, &t).unwrap() - 2.0).abs() < 1e-12);
        assert!(mse_loss(&r, &Tensor::zeros(vec![1, 4])).is_err());
    }

    #[test]
    fn mse_matches_two_loop_sum() {
        let mut rng = rng::stream(1, &[]);
        let mut rand = || {
            Tensor::new(vec![3, 2, 4, 4], (0..96).map(|_| rng.random_range(0.0..1.0)).collect())
                .unwrap()
        };
        let (a, b) = (rand(), rand());
        let mut total = 0.0;
        for i in 0..3 {
            let mut per = 0.0;
            for j in 0..32 {
                per += (a.data()[i * 32 + j] - b.data()[i * 32 + j]).powi(2);
            }
            total += per;
        }
        assert!((mse_loss(&a, &b).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ssl_loss_adds() {
        assert_eq!(ssl_loss(0.0, 0.0), 0.0);
        assert_eq!(ssl_loss(1.5, 0.25), 1.75);
        let lp = Tensor::matrix(&[&[0.3f64.ln(), 0.7f64.ln()], &[0.6f64.ln(), 0.4f64.ln()]]);
        let r = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.9, 0.2, 0.2, 0.0]).unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.3, 0.1, 0.0]).unwrap();
        let (ce, mse) = (ce_loss(&lp, &[1, 0]).unwrap(), mse_loss(&r, &t).unwrap());
        let expected = -(0.7f64.ln() + 0.6f64.ln()) / 2.0 + (0.01 + 0.01 + 0.01 + 0.01) / 2.0;
        assert!((ssl_loss(ce, mse) - expected).abs() < 1e-12);
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_dims: [3, 4, 4],
            encoder_widths: vec![6],
            repr_dim: 5,
            proj_dim: 3,
            n_classes: 2,
            n_centers: 2,
        }
    }

    fn tiny_pseudo(n: usize) -> Vec<Vec<PseudoSample>> {
        (0..2u32)
            .map(|c| {
                let mut r = rng::stream(c as u64, &[42]);
                (0..n)
                    .map(|_| PseudoSample {
                        image: Tensor::new(
                            vec![3, 4, 4],
                            (0..48).map(|_| r.random_range(0.0..1.0) * (0.5 + 0.5 * c as f64)).collect(),
                        )
                        .unwrap(),
                        center_id: c,
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let cfg = SslConfig { grid: 2, k_swaps: 1, ..SslConfig::default() };
        let pool = split_pools(&tiny_pseudo(3), 0.0, 0).unwrap().0;
        let batch = make_batch(&pool, &[0, 1, 4, 5], &cfg, |i| i as u64).unwrap();
        for seed in 0..5 {
            let w = crate::models::tests::jitter_biases(&models::init_weights(&spec, seed).unwrap(), seed)
                .select(&Segment::SSL);
            let loss_of = |p: &ParamSet| -> Result<(Graph, NodeId)> {
                let mut g = Graph::new();
                let b = Bound::new(&mut g, &ModelWeights::from_params(p.clone()), true)?;
                let x = models::input_node(&mut g, &spec, &batch.corrupted)?;
                let rep = models::encode_node(&mut g, &spec, &b, x)?;
                let logits = models::center_classify_node(&mut g, &spec, &b, rep)?;
                let lp = g.log_softmax(logits)?;
                let ce = g.nll(lp, &batch.center_labels)?;
                let restored = models::restore_node(&mut g, &spec, &b, rep)?;
                let t = g.constant(batch.targets.clone().reshape(vec![4, 48])?);
                let mse = mse_node(&mut g, restored, t)?;
                let l = g.add(ce, mse)?;
                Ok((g, l))
            };
            let (g, root) = loss_of(w.params()).unwrap();
            let analytic = g.backward(root).unwrap();
            let numeric = finite_diff_grad(|p| loss_of(p)?.0.value(root).item(), w.params(), 1e-5).unwrap();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let spec = tiny_spec();
        let cfg = SslConfig { epochs: 0, grid: 2, k_swaps: 1, ..SslConfig::default() };
        let (w, report) = pretrain(&tiny_pseudo(5), &spec, &cfg, 9).unwrap();
        assert!(w.params().bits_eq(models::init_weights(&spec, 9).unwrap().params()));
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn single_center_is_degenerate() {
        let spec = tiny_spec();
        let mut sets = tiny_pseudo(5);
        sets.truncate(1);
        let err = pretrain(&sets, &spec, &SslConfig { grid: 2, k_swaps: 1, ..SslConfig::default() }, 0);
        assert!(matches!(err, Err(Error::Contract(msg)) if msg.contains("degenerate")));
    }

    #[test]
    fn report_is_additive_and_reproducible() {
        let spec = tiny_spec();
        let cfg = SslConfig { epochs: 3, grid: 2, k_swaps: 1, ..SslConfig::default() };
        let (w1, r1) = pretrain(&tiny_pseudo(10), &spec, &cfg, 4).unwrap();
        let (w2, r2) = pretrain(&tiny_pseudo(10), &spec, &cfg, 4).unwrap();
        assert!(w1.params().bits_eq(w2.params()));
        assert_eq!(r1, r2);
        for rec in &r1.epochs {
            assert!((rec.l_ssl - (rec.l_ce + rec.l_mse)).abs() <= 1e-12);
        }
        assert_eq!(SslReport::from_jsonl(&r1.to_jsonl()).unwrap(), r1);
    }

    #[test]
    fn both_tasks_reach_the_shared_encoder() {
        let spec = tiny_spec();
        let base = SslConfig { epochs: 2, grid: 2, k_swaps: 1, ..SslConfig::default() };
        let pseudo = tiny_pseudo(8);
        let (both, _) = pretrain(&pseudo, &spec, &base, 1).unwrap();
        let (mse_only, _) = pretrain(&pseudo, &spec, &SslConfig { pretext: Pretext::Mse, ..base.clone() }, 1).unwrap();
        let (ce_only, _) = pretrain(&pseudo, &spec, &SslConfig { pretext: Pretext::Ce, ..base }, 1).unwrap();
        let enc = |w: &ModelWeights| w.segment(Segment::Encoder);
        assert!(enc(&both).max_abs_diff(&enc(&mse_only)) > 0.0);
        assert!(enc(&both).max_abs_diff(&enc(&ce_only)) > 0.0);
        // Heads outside a pretext's loss keep their initial values.
        let init = models::init_weights(&spec, 1).unwrap();
        assert!(ce_only.segment(Segment::Restore).bits_eq(&init.segment(Segment::Restore)));
        assert!(both.segment(Segment::Head).bits_eq(&init.segment(Segment::Head)));
    }
}
