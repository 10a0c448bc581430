use serde::{Deserialize, Serialize};

use super::metrics::{confusion, gta, mean_sd, metrics, MetricSet};
use super::pr::{pr_curve_ap, softmax_rows, PrReport};
use crate::error::{Error, Result};
use crate::fl::{run_federation, ClientData, Federation, FlConfig, RunHistory, Schedule};
use crate::models::{self, ModelSpec, ModelWeights};
use crate::numerics::Tensor;
use crate::rng;
use crate::synthdata::{kfold_split, CenterDataset};

/// Per-center partitions of one fold.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub clients: Vec<ClientData>,
    pub tests: Vec<CenterDataset>,
}

/// Stratified `k`-fold partitions of every center, split independently per
/// center with a seed derived from the center id.
pub fn fold_partitions(datasets: &[CenterDataset], k: usize, seed: u64) -> Result<Vec<FoldData>> {
    let mut folds: Vec<FoldData> = (0..k)
        .map(|_| FoldData {
            clients: Vec::new(),
            tests: Vec::new(),
        })
        .collect();
    for ds in datasets {
        let split_seed = rng::derive(seed, &[rng::tag::SPLIT, ds.center_id as u64]);
        for (fold, f) in folds.iter_mut().zip(kfold_split(&ds.labels(), k, split_seed)?) {
            let test = ds.subset(&f.test);
            fold.clients.push(ClientData {
                center_id: ds.center_id,
                train: ds.subset(&f.train),
                holdout: Some(test.clone()),
            });
            fold.tests.push(test);
        }
    }
    Ok(folds)
}

/// Seed of the federation trained on fold `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive(seed, &[rng::tag::FL, fold as u64])
}

/// Class probabilities of `model` on every test image, with the labels.
pub fn score_dataset(spec: &ModelSpec, model: &ModelWeights, test: &CenterDataset) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = test.samples.iter().map(|s| &s.image).collect();
    let probs = softmax_rows(&models::class_logits(spec, model, &images)?)?;
    Ok((probs, test.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub per_center: Vec<MetricSet>,
    pub gta: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<FoldResult>,
    /// Mean and sample SD of the per-fold GTA metrics.
    pub mean: MetricSet,
    pub sd: MetricSet,
    /// Per-center mean over folds.
    pub center_mean: Vec<MetricSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Curves over the pooled test predictions of every fold and center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr: Option<PrReport>,
}

impl FoldReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold reports serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "fold report",
            detail: e.to_string(),
        })
    }
}

/// Accumulates test predictions fold by fold.
#[derive(Debug, Default)]
pub struct FoldCollector {
    folds: Vec<FoldResult>,
    scores: Vec<f64>,
    truth: Vec<usize>,
    n_classes: usize,
}

impl FoldCollector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates `models[i]` on `tests[i]` for every center of one fold.
    pub fn add_fold(
        &mut self,
        spec: &ModelSpec,
        models: &[&ModelWeights],
        tests: &[CenterDataset],
    ) -> Result<&FoldResult> {
        if models.len() != tests.len() || tests.is_empty() {
            return Err(Error::contract(format!(
                "{} models for {} test sets",
                models.len(),
                tests.len()
            )));
        }
        let mut per_center = Vec::with_capacity(tests.len());
        for (model, test) in models.iter().zip(tests) {
            let (probs, truth) = score_dataset(spec, model, test)?;
            let preds = models::argmax_rows(&probs);
            per_center.push(metrics(&confusion(&preds, &truth, spec.n_classes)?)?);
            self.scores.extend_from_slice(probs.data());
            self.truth.extend(truth);
        }
        self.n_classes = spec.n_classes;
        let gta = gta(&per_center)?;
        self.folds.push(FoldResult {
            fold: self.folds.len(),
            per_center,
            gta,
        });
        Ok(self.folds.last().expect("just pushed"))
    }

    pub fn finish(self) -> Result<FoldReport> {
        if self.folds.is_empty() {
            return Err(Error::contract("no folds to summarise"));
        }
        let column = |f: &dyn Fn(&FoldResult) -> f64| -> Vec<f64> { self.folds.iter().map(f).collect() };
        let mut mean = [0.0; 4];
        let mut sd = [0.0; 4];
        for m in 0..4 {
            (mean[m], sd[m]) = mean_sd(&column(&|r| r.gta.values()[m]));
        }
        let n_centers = self.folds[0].per_center.len();
        let center_mean = (0..n_centers)
            .map(|c| {
                let mut v = [0.0; 4];
                for (m, slot) in v.iter_mut().enumerate() {
                    *slot = mean_sd(&column(&|r| r.per_center[c].values()[m])).0;
                }
                MetricSet::from_values(v)
            })
            .collect();
        let mut flags = vec!["precision/recall/f1 are macro-averaged over classes".to_owned()];
        for r in &self.folds {
            flags.extend(r.gta.degenerate.iter().map(|f| format!("fold {}: {f}", r.fold)));
        }
        let pr = if self.truth.is_empty() {
            None
        } else {
            let scores = Tensor::new(vec![self.truth.len(), self.n_classes], self.scores)?;
            Some(pr_curve_ap(&scores, &self.truth)?)
        };
        Ok(FoldReport {
            folds: self.folds,
            mean: MetricSet::from_values(mean),
            sd: MetricSet::from_values(sd),
            center_mean,
            flags,
            pr,
        })
    }
}

/// Outcome of [`cross_validate`]: the report plus each fold's trace.
#[derive(Clone, Debug)]
pub struct CvRun {
    pub report: FoldReport,
    pub histories: Vec<RunHistory>,
}

/// `k`-fold cross-validation of one federated configuration: for every fold,
/// train on the per-center training partitions, then evaluate each center's
/// deployed model on that center's test partition.
pub fn cross_validate(
    spec: &ModelSpec,
    cfg: &FlConfig,
    datasets: &[CenterDataset],
    k: usize,
    seed: u64,
    pretrained: Option<&ModelWeights>,
) -> Result<CvRun> {
    let mut collector = FoldCollector::new();
    let mut histories = Vec::with_capacity(k);
    for (fold, data) in fold_partitions(datasets, k, seed)?.into_iter().enumerate() {
        let fed: Federation =
            run_federation(spec, cfg, &data.clients, fold_seed(seed, fold), pretrained, Schedule::Sequential)?;
        let deployed: Vec<&ModelWeights> = (0..data.clients.len()).map(|i| fed.model_for(i)).collect();
        let r = collector.add_fold(spec, &deployed, &data.tests)?;
        log::info!("{} fold {fold}: GTA accuracy {:.4}", cfg.algorithm, r.gta.accuracy);
        histories.push(fed.history);
    }
    Ok(CvRun {
        report: collector.finish()?,
        histories,
    })
}
