use std::thread;

use super::client::{epoch_plan, materialize, party_local_training, ClientData, LocalUpdate};
use super::history::{ClientRecord, RoundRecord, RunHistory};
use super::objective::baseline_graph;
use super::FlConfig;
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ModelWeights, Segment};
use crate::numerics::{sgd_step, ParamSet};
use crate::rng;

/// Order in which clients run within a round. The result never depends on it;
/// it exists so that independence can be tested.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Sequential,
    Reversed,
    /// One scoped thread per client.
    Threaded,
}

/// `w_g = Σᵢ (mᵢ/M) wᵢ`, accumulated in client index order.
pub fn aggregate(updates: &[&ModelWeights], sizes: &[usize]) -> Result<ModelWeights> {
    if updates.len() != sizes.len() {
        return Err(Error::contract(format!(
            "{} updates but {} sample counts",
            updates.len(),
            sizes.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::contract("aggregation over zero samples"));
    }
    let alphas: Vec<f64> = sizes.iter().map(|&m| m as f64 / total as f64).collect();
    let sets: Vec<&ParamSet> = updates.iter().map(|w| w.params()).collect();
    ParamSet::affine_combination(&sets, &alphas).map(ModelWeights::from_params)
}

/// Fresh classifier weights; with `pretrained`, its encoder replaces the random
/// one while the projector and head stay freshly initialised.
pub fn initial_global(
    spec: &ModelSpec,
    seed: u64,
    pretrained: Option<&ModelWeights>,
) -> Result<ModelWeights> {
    let init_seed = rng::derive(seed, &[rng::tag::FL, rng::tag::INIT]);
    let mut w = models::init_weights(spec, init_seed)?.select(&Segment::FL);
    if let Some(p) = pretrained {
        p.check_against(spec, &[Segment::Encoder])?;
        w.transplant_encoder(p)?;
    }
    Ok(w)
}

/// Outcome of a federated run.
#[derive(Clone, Debug)]
pub struct Federation {
    pub federated: bool,
    pub global: ModelWeights,
    /// Each client's weights after its last local training.
    pub locals: Vec<ModelWeights>,
    pub history: RunHistory,
}

impl Federation {
    /// The model client `i` deploys: the global model, or its own for
    /// `local_only`.
    pub fn model_for(&self, i: usize) -> &ModelWeights {
        if self.federated {
            &self.global
        } else {
            &self.locals[i]
        }
    }
}

fn run_clients(
    spec: &ModelSpec,
    cfg: &FlConfig,
    clients: &[ClientData],
    starts: &[&ModelWeights],
    round: usize,
    seed: u64,
    schedule: Schedule,
) -> Vec<Result<LocalUpdate>> {
    let one = |i: usize| {
        party_local_training(spec, cfg, &clients[i], starts[i], starts[i], round, seed)
    };
    match schedule {
        Schedule::Sequential => (0..clients.len()).map(one).collect(),
        Schedule::Reversed => {
            let mut out: Vec<_> = (0..clients.len()).rev().map(|i| (i, one(i))).collect();
            out.sort_by_key(|(i, _)| *i);
            out.into_iter().map(|(_, r)| r).collect()
        }
        Schedule::Threaded => thread::scope(|s| {
            let handles: Vec<_> = (0..clients.len()).map(|i| s.spawn(move || one(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        }),
    }
}

fn holdout_accuracy(spec: &ModelSpec, w: &ModelWeights, client: &ClientData) -> Result<Option<f64>> {
    let Some(holdout) = client.holdout.as_ref().filter(|h| !h.is_empty()) else {
        return Ok(None);
    };
    let images: Vec<_> = holdout.samples.iter().map(|s| &s.image).collect();
    let pred = models::argmax_rows(&models::class_logits(spec, w, &images)?);
    let correct = pred.iter().zip(holdout.labels()).filter(|(p, y)| **p == *y).count();
    Ok(Some(correct as f64 / holdout.len() as f64))
}

/// Runs `cfg.rounds` rounds of local training and aggregation.
///
/// A failing client aborts the run with [`Error::Client`] naming it; the
/// lowest-index failure wins when several fail in the same round.
pub fn run_federation(
    spec: &ModelSpec,
    cfg: &FlConfig,
    clients: &[ClientData],
    seed: u64,
    pretrained: Option<&ModelWeights>,
    schedule: Schedule,
) -> Result<Federation> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::contract("federation needs at least one client"));
    }
    for c in clients {
        if c.train.n_classes != spec.n_classes {
            return Err(Error::contract(format!(
                "center {} has {} classes, model has {}",
                c.center_id, c.train.n_classes, spec.n_classes
            )));
        }
    }
    let federated = cfg.algorithm.is_federated();
    let sizes: Vec<usize> = clients.iter().map(ClientData::n_samples).collect();
    let mut global = initial_global(spec, seed, pretrained)?;
    let mut locals = vec![global.clone(); clients.len()];
    let mut history = RunHistory::default();
    for round in 0..cfg.rounds {
        let starts: Vec<&ModelWeights> = if federated {
            vec![&global; clients.len()]
        } else {
            locals.iter().collect()
        };
        let results = run_clients(spec, cfg, clients, &starts, round, seed, schedule);
        let mut updates = Vec::with_capacity(clients.len());
        for (client, r) in clients.iter().zip(results) {
            updates.push(r.map_err(|e| Error::Client {
                center_id: client.center_id,
                source: Box::new(e),
            })?);
        }
        global = aggregate(&updates.iter().map(|u| &u.weights).collect::<Vec<_>>(), &sizes)?;
        locals = updates.iter().map(|u| u.weights.clone()).collect();
        let evaluate = cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0;
        let mut records = Vec::with_capacity(clients.len());
        for (i, (client, u)) in clients.iter().zip(&updates).enumerate() {
            let deployed = if federated { &global } else { &locals[i] };
            records.push(ClientRecord {
                center_id: client.center_id,
                n_samples: client.n_samples(),
                steps: u.steps,
                l_sup: u.sup,
                l_flbt: u.bt,
                l_total: u.total,
                holdout_acc: if evaluate {
                    holdout_accuracy(spec, deployed, client)?
                } else {
                    None
                },
            });
        }
        log::debug!(
            "{} round {}: mean loss {:.4}",
            cfg.algorithm,
            round + 1,
            records.iter().map(|r| r.l_total).sum::<f64>() / records.len() as f64
        );
        history.rounds.push(RoundRecord {
            round: round + 1,
            clients: records,
            global_checksum: global.params().checksum(),
        });
    }
    Ok(Federation {
        federated,
        global,
        locals,
        history,
    })
}

/// Plain minibatch SGD on one dataset with the batch stream of a single-client
/// federation: `rounds × local_epochs` epochs, no aggregation step.
pub fn train_centralized(
    spec: &ModelSpec,
    cfg: &FlConfig,
    data: &ClientData,
    seed: u64,
    pretrained: Option<&ModelWeights>,
) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut w = initial_global(spec, seed, pretrained)?;
    for round in 0..cfg.rounds {
        for epoch in 0..cfg.local_epochs {
            for batch in epoch_plan(data.n_samples(), cfg, seed, data.center_id, round, epoch) {
                let (x, y) = materialize(&data.train, &batch)?;
                let ev = baseline_graph(spec, &w, &w, &x, &y, 0.0)?.evaluate()?;
                w = ModelWeights::from_params(sgd_step(w.params(), &ev.grads, cfg.lr)?);
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::{Algorithm, Augment};
    use crate::numerics::Tensor;
    use crate::synthdata::{default_centers, generate_center_dataset, CenterDataset};
    use proptest::prelude::*;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_dims: [3, 8, 8],
            encoder_widths: vec![16],
            repr_dim: 8,
            proj_dim: 4,
            n_classes: 4,
            n_centers: 3,
        }
    }

    fn clients(per_class: usize) -> Vec<ClientData> {
        default_centers()
            .iter()
            .map(|c| {
                let spec = crate::synthdata::CenterSpec { n_per_class: per_class, ..c.clone() };
                ClientData::new(generate_center_dataset(&spec, 8, 11).unwrap())
            })
            .collect()
    }

    fn cfg(algorithm: Algorithm, rounds: usize) -> FlConfig {
        FlConfig {
            algorithm,
            rounds,
            lr: 0.05,
            augment: Augment::Random,
            ..Default::default()
        }
    }

    fn random_weights(seed: u64) -> ModelWeights {
        models::init_weights(&small_spec(), seed).unwrap().select(&Segment::FL)
    }

    #[test]
    fn aggregation_edge_cases() {
        let a = random_weights(1);
        assert!(aggregate(&[&a], &[7]).unwrap().params().bits_eq(a.params()));
        let same = aggregate(&[&a, &a, &a], &[3, 1, 9]).unwrap();
        assert!(same.params().bits_eq(a.params()));
        assert!(aggregate(&[&a, &a], &[0, 0]).is_err());
        assert!(aggregate(&[&a], &[1, 2]).is_err());
        let other = ModelWeights::from_params(models::init_weights(&ModelSpec::default(), 0)
            .unwrap()
            .select(&Segment::FL)
            .into_params());
        assert!(matches!(aggregate(&[&a, &other], &[1, 1]), Err(Error::Incompatible(_))));
    }

    #[test]
    fn weighted_average_arithmetic() {
        let w = |a: f64, b: f64| {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::vector(vec![a, b]));
            ModelWeights::from_params(p)
        };
        let agg = aggregate(&[&w(0.0, 4.0), &w(4.0, 0.0)], &[1, 3]).unwrap();
        assert_eq!(agg.params().get("w").unwrap().data(), &[3.0, 1.0]);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let ws: Vec<ModelWeights> = (0..4).map(random_weights).collect();
        let sizes = [5, 17, 2, 40];
        let fwd = aggregate(&ws.iter().collect::<Vec<_>>(), &sizes).unwrap();
        let rev = aggregate(&ws.iter().rev().collect::<Vec<_>>(), &[40, 2, 17, 5]).unwrap();
        assert!(fwd.params().max_abs_diff(rev.params()) <= 1e-15);
    }

    #[test]
    fn zero_rounds_return_the_initial_model() {
        let spec = small_spec();
        let run = run_federation(&spec, &cfg(Algorithm::FlBt, 0), &clients(1), 3, None, Schedule::Sequential)
            .unwrap();
        assert!(run.global.params().bits_eq(initial_global(&spec, 3, None).unwrap().params()));
        assert!(run.history.rounds.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn aggregation_matches_weighted_sum(
            sizes in prop::collection::vec(1usize..200, 1..5),
            seed in 0u64..1000,
        ) {
            let ws: Vec<ModelWeights> = (0..sizes.len()).map(|i| random_weights(seed + i as u64)).collect();
            let refs: Vec<&ModelWeights> = ws.iter().collect();
            let agg = aggregate(&refs, &sizes).unwrap();
            let total: usize = sizes.iter().sum();
            for (name, t) in agg.params().iter() {
                for (k, &v) in t.data().iter().enumerate() {
                    let want: f64 = ws.iter().zip(&sizes)
                        .map(|(w, &m)| m as f64 / total as f64 * w.params().get(name).unwrap().data()[k])
                        .sum();
                    prop_assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn schedules_agree_bitwise() {
        let spec = small_spec();
        let cs = clients(3);
        for algorithm in [Algorithm::FlBt, Algorithm::LocalOnly] {
            let c = cfg(algorithm, 2);
            let runs: Vec<Federation> = [Schedule::Sequential, Schedule::Reversed, Schedule::Threaded]
                .into_iter()
                .map(|s| run_federation(&spec, &c, &cs, 4, None, s).unwrap())
                .collect();
            for r in &runs[1..] {
                assert_eq!(r.history.to_jsonl(), runs[0].history.to_jsonl());
                assert!(r.global.params().bits_eq(runs[0].global.params()));
            }
        }
    }

    #[test]
    fn reduction_chain_is_bitwise() {
        let spec = small_spec();
        let cs = clients(3);
        let base = run_federation(&spec, &cfg(Algorithm::FedAvg, 3), &cs, 9, None, Schedule::Sequential)
            .unwrap();
        let bt = FlConfig { mu: 0.0, ..cfg(Algorithm::FlBt, 3) };
        let prox = FlConfig { prox_rho: 0.0, ..cfg(Algorithm::FedProx, 3) };
        for c in [bt, prox] {
            let run = run_federation(&spec, &c, &cs, 9, None, Schedule::Sequential).unwrap();
            assert_eq!(run.history.checksum(), base.history.checksum(), "{}", c.algorithm);
        }
        let with_bt = run_federation(&spec, &cfg(Algorithm::FlBt, 3), &cs, 9, None, Schedule::Sequential)
            .unwrap();
        assert_ne!(with_bt.history.final_checksum(), base.history.final_checksum());
    }

    #[test]
    fn single_client_matches_centralized_training() {
        let spec = small_spec();
        let mut union = CenterDataset { center_id: 0, n_classes: 4, samples: Vec::new() };
        for c in clients(2) {
            union.samples.extend(c.train.samples);
        }
        let client = ClientData::new(union);
        let c = FlConfig { local_epochs: 2, ..cfg(Algorithm::FedAvg, 3) };
        let fed = run_federation(&spec, &c, std::slice::from_ref(&client), 5, None, Schedule::Sequential)
            .unwrap();
        let central = train_centralized(&spec, &c, &client, 5, None).unwrap();
        assert!(fed.global.params().bits_eq(central.params()));
    }

    #[test]
    fn local_only_never_shares() {
        let spec = small_spec();
        let cs = clients(2);
        let run = run_federation(&spec, &cfg(Algorithm::LocalOnly, 2), &cs, 1, None, Schedule::Sequential)
            .unwrap();
        for (i, c) in cs.iter().enumerate() {
            let alone = run_federation(
                &spec,
                &cfg(Algorithm::LocalOnly, 2),
                std::slice::from_ref(c),
                1,
                None,
                Schedule::Sequential,
            )
            .unwrap();
            assert!(alone.model_for(0).params().bits_eq(run.model_for(i).params()));
        }
    }

    #[test]
    fn pretrained_encoder_is_transplanted() {
        let spec = small_spec();
        let pre = models::init_weights(&spec, 77).unwrap().select(&Segment::SSL);
        let w = initial_global(&spec, 3, Some(&pre)).unwrap();
        assert!(w.segment(Segment::Encoder).bits_eq(&pre.segment(Segment::Encoder)));
        let fresh = initial_global(&spec, 3, None).unwrap();
        assert!(w.segment(Segment::Head).bits_eq(&fresh.segment(Segment::Head)));
        let wrong = models::init_weights(&ModelSpec { repr_dim: 9, ..small_spec() }, 0).unwrap();
        assert!(initial_global(&spec, 3, Some(&wrong)).is_err());
    }

    #[test]
    fn failing_client_is_named() {
        let spec = small_spec();
        let mut cs = clients(2);
        let bad = &mut cs[1].train.samples[0].image;
        *bad = Tensor::full(bad.shape().to_vec(), f64::MAX);
        let err = run_federation(&spec, &cfg(Algorithm::FedAvg, 1), &cs, 0, None, Schedule::Sequential)
            .unwrap_err();
        match err {
            Error::Client { center_id, source } => {
                assert_eq!(center_id, cs[1].center_id);
                assert!(source.is_numeric(), "{source}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn training_reduces_loss_and_reports_holdout() {
        let spec = small_spec();
        let mut cs = clients(4);
        for c in &mut cs {
            c.holdout = Some(c.train.clone());
        }
        let c = FlConfig { eval_every: 5, ..cfg(Algorithm::FlBt, 10) };
        let run = run_federation(&spec, &c, &cs, 2, None, Schedule::Sequential).unwrap();
        let losses = run.history.mean_total_loss();
        assert!(losses[9] < losses[0], "{losses:?}");
        assert!(run.history.rounds[4].clients.iter().all(|r| r.holdout_acc.is_some()));
        assert!(run.history.rounds[3].clients.iter().all(|r| r.holdout_acc.is_none()));
    }
}
