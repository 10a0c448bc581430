use std::path::{Path, PathBuf};

use fedbt_core::ssl::Pretext;

use crate::config::ExperimentConfig;

/// Where each artifact lives under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    data: PathBuf,
    checkpoints: PathBuf,
    reports: PathBuf,
}

impl Layout {
    pub fn new(out: &Path, cfg: &ExperimentConfig) -> Self {
        Layout {
            data: out.join(&cfg.paths.data),
            checkpoints: out.join(&cfg.paths.checkpoints),
            reports: out.join(&cfg.paths.reports),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data
    }

    pub fn reports_dir(&self) -> &Path {
        &self.reports
    }

    pub fn center_archive(&self, center: u32) -> PathBuf {
        self.data.join(format!("center_{center}.fbt"))
    }

    pub fn pseudo_archive(&self, center: u32) -> PathBuf {
        self.data.join(format!("pseudo_{center}.fbt"))
    }

    pub fn ssl_checkpoint(&self, pretext: Pretext) -> PathBuf {
        self.checkpoints.join(format!("ssl_{}.ckpt", pretext.as_str()))
    }

    pub fn ssl_report(&self, pretext: Pretext) -> PathBuf {
        self.reports.join(format!("ssl_{}.jsonl", pretext.as_str()))
    }

    /// Checkpoints of one training run.
    pub fn run_checkpoints(&self, run: &str) -> PathBuf {
        self.checkpoints.join(run)
    }

    pub fn fold_checkpoint(&self, run: &str, fold: usize, which: &str) -> PathBuf {
        self.run_checkpoints(run).join(format!("fold{fold}_{which}.ckpt"))
    }

    pub fn run_meta(&self, run: &str) -> PathBuf {
        self.run_checkpoints(run).join("run.json")
    }

    pub fn run_reports(&self, run: &str) -> PathBuf {
        self.reports.join(run)
    }

    pub fn history(&self, run: &str, fold: usize) -> PathBuf {
        self.run_reports(run).join(format!("history_fold{fold}.jsonl"))
    }

    pub fn fold_report(&self, run: &str) -> PathBuf {
        self.run_reports(run).join("fold_report.json")
    }

    pub fn pr_points(&self, run: &str) -> PathBuf {
        self.run_reports(run).join("pr_points.txt")
    }

    pub fn table(&self) -> PathBuf {
        self.reports.join("table.txt")
    }
}
