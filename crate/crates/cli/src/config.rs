use std::collections::HashSet;
use std::path::{Path, PathBuf};

use fedbt_core::fl::FlConfig;
use fedbt_core::models::ModelSpec;
use fedbt_core::ssl::SslConfig;
use fedbt_core::synthdata::{default_centers, CenterSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k_folds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k_folds: 5 }
    }
}

/// Output subdirectories, relative to `--out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything one experiment needs, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub master_seed: u64,
    /// Pseudo images generated per center.
    #[serde(default = "default_pseudo_n")]
    pub pseudo_n: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_centers")]
    pub centers: Vec<CenterSpec>,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub fl: FlConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: Paths,
}

fn default_pseudo_n() -> usize {
    1000
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            pseudo_n: default_pseudo_n(),
            model: ModelSpec::default(),
            centers: default_centers(),
            ssl: SslConfig::default(),
            fl: FlConfig::default(),
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{name}`: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Side of the square images the model consumes.
    pub fn image_side(&self) -> usize {
        self.model.input_dims[1]
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.model.validate().map_err(|e| field("model", e))?;
        let [c, h, w] = self.model.input_dims;
        if c != 3 || h != w {
            return Err(field("model.input_dims", "images are [3, side, side]"));
        }
        if self.centers.len() != self.model.n_centers {
            return Err(field(
                "centers",
                format!("{} centers but model.n_centers = {}", self.centers.len(), self.model.n_centers),
            ));
        }
        let mut ids = HashSet::new();
        for (i, center) in self.centers.iter().enumerate() {
            let name = format!("centers[{i}]");
            center.validate().map_err(|e| field(&name, e))?;
            if center.center_id as usize >= self.centers.len() || !ids.insert(center.center_id) {
                return Err(field(
                    &format!("{name}.center_id"),
                    "ids must be distinct and in 0..n_centers",
                ));
            }
            if center.n_classes() != self.model.n_classes {
                return Err(field(
                    &format!("{name}.prototypes"),
                    format!("{} classes but model.n_classes = {}", center.n_classes(), self.model.n_classes),
                ));
            }
            if center.n_per_class < self.eval.k_folds {
                return Err(field(
                    &format!("{name}.n_per_class"),
                    format!("{} is fewer than eval.k_folds = {}", center.n_per_class, self.eval.k_folds),
                ));
            }
        }
        if self.pseudo_n == 0 {
            return Err(field("pseudo_n", "must be ≥ 1"));
        }
        self.ssl.validate().map_err(|e| field("ssl", e))?;
        self.fl.validate().map_err(|e| field("fl", e))?;
        if self.eval.k_folds < 2 {
            return Err(field("eval.k_folds", "must be ≥ 2"));
        }
        Ok(())
    }
}
