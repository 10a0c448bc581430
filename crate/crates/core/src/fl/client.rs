use rand::seq::SliceRandom;
use rand::Rng as _;

use super::objective::client_objective;
use super::{Augment, FlConfig};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, ModelWeights};
use crate::numerics::{sgd_step, Tensor};
use crate::rng;
use crate::synthdata::{augment_variant, CenterDataset};

/// One center's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub center_id: u32,
    pub train: CenterDataset,
    /// Evaluated every `eval_every` rounds when present.
    pub holdout: Option<CenterDataset>,
}

impl ClientData {
    pub fn new(train: CenterDataset) -> Self {
        ClientData {
            center_id: train.center_id,
            train,
            holdout: None,
        }
    }

    /// Aggregation weight: the number of original, unaugmented samples.
    pub fn n_samples(&self) -> usize {
        self.train.len()
    }
}

/// Result of one client's local training in one round.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub weights: ModelWeights,
    pub steps: usize,
    /// Mean losses over the steps taken (zero when no step was taken).
    pub sup: f64,
    pub bt: f64,
    pub total: f64,
}

/// Mini-batches of `(sample index, dihedral variant)` for one local epoch.
///
/// The stream depends only on the master seed, the center, the round and the
/// epoch. A trailing partial batch is dropped unless it is the only batch.
pub fn epoch_plan(
    n: usize,
    cfg: &FlConfig,
    seed: u64,
    center_id: u32,
    round: usize,
    epoch: usize,
) -> Vec<Vec<(usize, usize)>> {
    let mut rng = rng::stream(
        seed,
        &[rng::tag::FL, rng::tag::SHUFFLE, center_id as u64, round as u64, epoch as u64],
    );
    let mut items: Vec<(usize, usize)> = match cfg.augment {
        Augment::None => (0..n).map(|i| (i, 0)).collect(),
        Augment::Random => (0..n).map(|i| (i, rng.random_range(0..8))).collect(),
        Augment::Full => (0..n).flat_map(|i| (0..8).map(move |v| (i, v))).collect(),
    };
    items.shuffle(&mut rng);
    let mut batches: Vec<Vec<(usize, usize)>> =
        items.chunks(cfg.batch).map(<[_]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < cfg.batch) {
        batches.pop();
    }
    batches
}

pub(crate) fn materialize(
    data: &CenterDataset,
    batch: &[(usize, usize)],
) -> Result<(Tensor, Vec<usize>)> {
    let images = batch
        .iter()
        .map(|&(i, v)| {
            if v == 0 {
                Ok(data.samples[i].image.clone())
            } else {
                augment_variant(&data.samples[i].image, v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = batch.iter().map(|&(i, _)| data.samples[i].label).collect();
    Ok((Tensor::stack(&images.iter().collect::<Vec<_>>())?, labels))
}

/// `E` epochs of SGD on the client's objective, starting from `start`.
///
/// `global` is the frozen model the objective refers to (the proximal anchor or
/// the Barlow Twins target). Federated algorithms pass the same model for both.
pub fn party_local_training(
    spec: &ModelSpec,
    cfg: &FlConfig,
    client: &ClientData,
    start: &ModelWeights,
    global: &ModelWeights,
    round: usize,
    seed: u64,
) -> Result<LocalUpdate> {
    if client.n_samples() == 0 {
        return Err(Error::contract(format!("center {} has no training samples", client.center_id)));
    }
    start.params().ensure_compatible(global.params())?;
    let mut w = start.clone();
    let (mut steps, mut sup, mut bt, mut total) = (0usize, 0.0, 0.0, 0.0);
    for epoch in 0..cfg.local_epochs {
        for batch in epoch_plan(client.n_samples(), cfg, seed, client.center_id, round, epoch) {
            let (x, y) = materialize(&client.train, &batch)?;
            let ev = client_objective(cfg, spec, &w, global, &x, &y)?;
            w = ModelWeights::from_params(sgd_step(w.params(), &ev.grads, cfg.lr)?);
            steps += 1;
            sup += ev.parts.sup;
            bt += ev.parts.bt;
            total += ev.parts.total;
        }
    }
    let denom = steps.max(1) as f64;
    Ok(LocalUpdate {
        weights: w,
        steps,
        sup: sup / denom,
        bt: bt / denom,
        total: total / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::Algorithm;
    use crate::models::{init_weights, Segment};
    use crate::synthdata::{default_centers, generate_center_dataset, CenterSpec};

    #[test]
    fn plan_covers_every_sample_once_per_variant() {
        for (augment, copies) in [(Augment::None, 1), (Augment::Random, 1), (Augment::Full, 8)] {
            let cfg = FlConfig { augment, batch: 4, ..Default::default() };
            let plan = epoch_plan(12, &cfg, 3, 1, 0, 0);
            let mut seen = [0; 12];
            for b in &plan {
                assert_eq!(b.len(), 4);
                for &(i, v) in b {
                    seen[i] += 1;
                    assert!(v < 8);
                }
            }
            assert!(seen.iter().all(|&c| c == copies), "{augment:?}");
            assert_eq!(plan, epoch_plan(12, &cfg, 3, 1, 0, 0));
            assert_ne!(plan, epoch_plan(12, &cfg, 3, 1, 1, 0));
        }
    }

    #[test]
    fn partial_batches() {
        let cfg = FlConfig { augment: Augment::None, batch: 4, ..Default::default() };
        assert_eq!(epoch_plan(10, &cfg, 0, 0, 0, 0).len(), 2);
        let only = epoch_plan(3, &cfg, 0, 0, 0, 0);
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].len(), 3);
    }

    #[test]
    fn zero_epochs_returns_the_start_bitwise() {
        let spec = ModelSpec { input_dims: [3, 8, 8], ..Default::default() };
        let data = generate_center_dataset(&default_centers()[0], 8, 0).unwrap();
        let client = ClientData::new(data);
        let w = init_weights(&spec, 0).unwrap().select(&Segment::FL);
        for algorithm in Algorithm::ALL {
            let cfg = FlConfig { algorithm, local_epochs: 0, ..Default::default() };
            let up = party_local_training(&spec, &cfg, &client, &w, &w, 0, 1).unwrap();
            assert!(up.weights.params().bits_eq(w.params()));
            assert_eq!(up.steps, 0);
        }
        let cfg = FlConfig { augment: Augment::None, ..Default::default() };
        let up = party_local_training(&spec, &cfg, &client, &w, &w, 0, 1).unwrap();
        assert_eq!(up.steps, client.n_samples() / 4);
        assert!(!up.weights.params().bits_eq(w.params()));
    }

    #[test]
    fn one_batch_is_one_manual_sgd_step() {
        let spec = ModelSpec { input_dims: [3, 8, 8], ..Default::default() };
        let center = CenterSpec { n_per_class: 1, ..default_centers()[1].clone() };
        let data = generate_center_dataset(&center, 8, 4).unwrap();
        let client = ClientData::new(data);
        let w = init_weights(&spec, 2).unwrap().select(&Segment::FL);
        let cfg = FlConfig { mu: 0.0, augment: Augment::None, lr: 0.01, ..Default::default() };
        let up = party_local_training(&spec, &cfg, &client, &w, &w, 0, 8).unwrap();
        assert_eq!(up.steps, 1);

        let plan = epoch_plan(client.n_samples(), &cfg, 8, client.center_id, 0, 0);
        let (x, y) = materialize(&client.train, &plan[0]).unwrap();
        let grads = crate::fl::objective::baseline_graph(&spec, &w, &w, &x, &y, 0.0)
            .unwrap()
            .evaluate()
            .unwrap()
            .grads;
        let manual = sgd_step(w.params(), &grads, 0.01).unwrap();
        assert!(up.weights.params().bits_eq(&manual));
    }

    #[test]
    fn empty_client_is_rejected() {
        let spec = ModelSpec::default();
        let mut data = generate_center_dataset(&default_centers()[0], 16, 0).unwrap();
        data.samples.clear();
        let w = init_weights(&spec, 0).unwrap().select(&Segment::FL);
        let err = party_local_training(&spec, &FlConfig::default(), &ClientData::new(data), &w, &w, 0, 0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
