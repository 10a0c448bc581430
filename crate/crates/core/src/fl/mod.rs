//! Federated training: the Barlow Twins alignment term, the local objectives
//! of every algorithm, client-side SGD, weighted aggregation and the server
//! loop.

pub mod bt;
mod client;
mod history;
pub mod objective;
mod server;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bt::{bt_loss, cross_correlation, CrossCorr};
pub use client::{epoch_plan, party_local_training, ClientData, LocalUpdate};
pub use history::{ClientRecord, RoundRecord, RunHistory};
pub use objective::{client_objective, sup_loss, LossParts};
pub use server::{
    aggregate, initial_global, run_federation, train_centralized, Federation, Schedule,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Each center trains alone; nothing is shared.
    #[serde(rename = "local_only")]
    LocalOnly,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    /// Cross-entropy plus the Barlow Twins alignment with the global model.
    #[serde(rename = "fl_bt")]
    FlBt,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] =
        [Algorithm::LocalOnly, Algorithm::FedAvg, Algorithm::FedProx, Algorithm::FlBt];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::LocalOnly => "local_only",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FlBt => "fl_bt",
        }
    }

    /// Whether clients start each round from the aggregated model.
    pub fn is_federated(self) -> bool {
        self != Algorithm::LocalOnly
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown algorithm `{s}` (local_only|fedavg|fedprox|fl_bt)"
                ))
            })
    }
}

/// How the dihedral augmentation enters local training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    None,
    /// One random variant per sample per epoch.
    Random,
    /// All eight variants of every sample in every epoch.
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Weight of the Barlow Twins term.
    pub mu: f64,
    /// Off-diagonal weight inside the Barlow Twins loss.
    pub lambda: f64,
    /// FedProx proximal coefficient.
    pub prox_rho: f64,
    /// Mean-center projections before correlating them.
    pub bt_centered: bool,
    pub augment: Augment,
    /// Evaluate on client holdouts every this many rounds (0 = never).
    pub eval_every: usize,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            algorithm: Algorithm::FlBt,
            rounds: 300,
            local_epochs: 1,
            lr: 0.001,
            batch: 4,
            mu: 0.01,
            lambda: 0.005,
            prox_rho: 0.01,
            bt_centered: false,
            augment: Augment::Full,
            eval_every: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::contract("batch size must be ≥ 1"));
        }
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda), ("prox_rho", self.prox_rho)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::contract(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if self.algorithm == Algorithm::FlBt && self.mu > 0.0 && self.batch < 2 {
            return Err(Error::contract("fl_bt with mu > 0 needs batch ≥ 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{a}\""));
        }
        assert!("fedsgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        FlConfig::default().validate().unwrap();
        let bad = [
            FlConfig { lr: 0.0, ..Default::default() },
            FlConfig { batch: 0, ..Default::default() },
            FlConfig { mu: -1.0, ..Default::default() },
            FlConfig { batch: 1, ..Default::default() },
            FlConfig { prox_rho: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        FlConfig { batch: 1, mu: 0.0, ..Default::default() }.validate().unwrap();
        FlConfig { batch: 1, algorithm: Algorithm::FedAvg, ..Default::default() }
            .validate()
            .unwrap();
    }
}
