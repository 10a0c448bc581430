use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub center_id: u32,
    pub n_samples: usize,
    pub steps: usize,
    pub l_sup: f64,
    pub l_flbt: f64,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    /// SHA-256 of the aggregated model after this round.
    pub global_checksum: String,
}

/// Per-round training trace. Contains no timing information, so two runs with
/// the same inputs serialize to identical bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub rounds: Vec<RoundRecord>,
}

impl RunHistory {
    pub fn to_jsonl(&self) -> String {
        self.rounds
            .iter()
            .map(|r| serde_json::to_string(r).expect("round records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rounds = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    what: "run history",
                    detail: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunHistory { rounds })
    }

    /// SHA-256 over the JSONL form.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn final_checksum(&self) -> Option<&str> {
        self.rounds.last().map(|r| r.global_checksum.as_str())
    }

    /// Sample-weighted mean of `l_total` per round.
    pub fn mean_total_loss(&self) -> Vec<f64> {
        self.rounds
            .iter()
            .map(|r| {
                let n: usize = r.clients.iter().map(|c| c.n_samples).sum();
                r.clients.iter().map(|c| c.l_total * c.n_samples as f64).sum::<f64>()
                    / n.max(1) as f64
            })
            .collect()
    }
}
