//! One function per subcommand. Each validates the config first and only then
//! touches the filesystem.

use std::fs;
use std::path::Path;

use fedbt_core::eval::{fold_partitions, fold_seed, FoldCollector, FoldReport};
use fedbt_core::fl::{run_federation, Algorithm, Schedule};
use fedbt_core::models::{ModelWeights, Segment};
use fedbt_core::numerics::checkpoint;
use fedbt_core::ssl::{self, Pretext, SslConfig, SslReport};
use fedbt_core::synthdata::{
    count_collisions, generate_center_dataset, generate_pseudo_images, Archive, CenterDataset,
    PseudoSample,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::layout::Layout;
use crate::table;
use crate::CliError;

/// Which trained configuration a `train`/`evaluate` call refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    /// Pretext of the SSL checkpoint the encoder starts from, if any.
    pub ssl_init: Option<Pretext>,
}

impl RunSpec {
    /// `fl_bt`, `ssl_fl_bt`, `ssl_c_fl_bt`, `ssl_r_fl_bt`, ...
    pub fn name(&self) -> String {
        let prefix = match self.ssl_init {
            None => "",
            Some(Pretext::Both) => "ssl_",
            Some(Pretext::Ce) => "ssl_c_",
            Some(Pretext::Mse) => "ssl_r_",
        };
        format!("{prefix}{}", self.algorithm)
    }
}

/// Written next to a run's checkpoints so `evaluate` knows what to load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run: RunSpec,
    pub k_folds: usize,
    pub n_centers: usize,
    pub rounds: usize,
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn save_weights(path: &Path, w: &ModelWeights) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(path, w.params())?;
    Ok(())
}

fn load_weights(path: &Path, hint: &str) -> Result<ModelWeights, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("missing {} ({hint})", path.display())));
    }
    Ok(ModelWeights::from_params(checkpoint::load(path)?))
}

fn load_archive(path: &Path) -> Result<Archive, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("missing {} (run gen-data first)", path.display())));
    }
    Ok(Archive::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenDataSummary {
    pub real: Vec<usize>,
    pub pseudo: Vec<usize>,
    pub collisions: usize,
}

/// Generates every center's labelled set and its pseudo set, refusing to
/// write anything if a pseudo image equals any real image.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<GenDataSummary, CliError> {
    cfg.validate()?;
    let side = cfg.image_side();
    let mut real = Vec::new();
    let mut pseudo = Vec::new();
    for center in &cfg.centers {
        let ds = generate_center_dataset(center, side, cfg.master_seed)?;
        pseudo.push(generate_pseudo_images(&ds, cfg.pseudo_n, cfg.master_seed)?);
        real.push(ds);
    }
    let collisions = count_collisions(
        pseudo.iter().flatten().map(|p| &p.image),
        real.iter().flat_map(|d| d.samples.iter().map(|s| &s.image)),
    );
    if collisions > 0 {
        return Err(CliError::Data(format!("{collisions} pseudo images equal a real image")));
    }
    fs::create_dir_all(layout.data_dir())?;
    for (ds, ps) in real.iter().zip(&pseudo) {
        Archive::from_dataset(ds)?.save(layout.center_archive(ds.center_id))?;
        Archive::from_pseudo(ps, cfg.model.n_classes)?.save(layout.pseudo_archive(ds.center_id))?;
    }
    log::info!("wrote {} centers to {}", real.len(), layout.data_dir().display());
    Ok(GenDataSummary {
        real: real.iter().map(CenterDataset::len).collect(),
        pseudo: pseudo.iter().map(Vec::len).collect(),
        collisions,
    })
}

fn check_dims(cfg: &ExperimentConfig, image: &fedbt_core::Tensor, what: &Path) -> Result<(), CliError> {
    if image.shape() != cfg.model.input_dims {
        return Err(CliError::Data(format!(
            "{}: images are {:?}, model expects {:?}",
            what.display(),
            image.shape(),
            cfg.model.input_dims
        )));
    }
    Ok(())
}

/// The labelled archives of every configured center, in center order.
pub fn load_datasets(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<CenterDataset>, CliError> {
    let mut out = Vec::new();
    for center in &cfg.centers {
        let path = layout.center_archive(center.center_id);
        let ds = load_archive(&path)?.to_dataset()?;
        if ds.center_id != center.center_id || ds.is_empty() {
            return Err(CliError::Data(format!("{} does not hold center {}", path.display(), center.center_id)));
        }
        check_dims(cfg, &ds.samples[0].image, &path)?;
        out.push(ds);
    }
    Ok(out)
}

pub fn load_pseudo(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<Vec<PseudoSample>>, CliError> {
    let mut out = Vec::new();
    for center in &cfg.centers {
        let path = layout.pseudo_archive(center.center_id);
        let ps = load_archive(&path)?.to_pseudo()?;
        match ps.first() {
            Some(p) => check_dims(cfg, &p.image, &path)?,
            None => return Err(CliError::Data(format!("{} is empty", path.display()))),
        }
        out.push(ps);
    }
    Ok(out)
}

/// Multi-task SSL on the pooled pseudo sets.
pub fn pretrain(cfg: &ExperimentConfig, layout: &Layout, pretext: Pretext) -> Result<SslReport, CliError> {
    cfg.validate()?;
    let pseudo = load_pseudo(cfg, layout)?;
    let ssl_cfg = SslConfig { pretext, ..cfg.ssl.clone() };
    let (weights, report) = ssl::pretrain(&pseudo, &cfg.model, &ssl_cfg, cfg.master_seed)?;
    save_weights(&layout.ssl_checkpoint(pretext), &weights)?;
    write(&layout.ssl_report(pretext), &report.to_jsonl())?;
    if let Some(last) = report.epochs.last() {
        log::info!(
            "pretext {pretext:?}: final L_SSL {:.4}, held-out center accuracy {:.3}",
            last.l_ssl,
            last.holdout_acc
        );
    }
    Ok(report)
}

/// Runs one federation per cross-validation fold and stores every fold's
/// global model, per-center local models and history.
pub fn train(cfg: &ExperimentConfig, layout: &Layout, run: RunSpec) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    cfg.fl.algorithm = run.algorithm;
    cfg.validate()?;
    let datasets = load_datasets(&cfg, layout)?;
    let pretrained = match run.ssl_init {
        Some(pretext) => {
            let w = load_weights(&layout.ssl_checkpoint(pretext), "run pretrain with the same --pretext first")?;
            w.check_against(&cfg.model, &[Segment::Encoder])?;
            Some(w)
        }
        None => None,
    };
    let name = run.name();
    let k = cfg.eval.k_folds;
    for (fold, data) in fold_partitions(&datasets, k, cfg.master_seed)?.into_iter().enumerate() {
        let fed = run_federation(
            &cfg.model,
            &cfg.fl,
            &data.clients,
            fold_seed(cfg.master_seed, fold),
            pretrained.as_ref(),
            Schedule::Sequential,
        )?;
        save_weights(&layout.fold_checkpoint(&name, fold, "global"), &fed.global)?;
        for (client, local) in data.clients.iter().zip(&fed.locals) {
            let which = format!("center{}", client.center_id);
            save_weights(&layout.fold_checkpoint(&name, fold, &which), local)?;
        }
        write(&layout.history(&name, fold), &fed.history.to_jsonl())?;
        log::info!("{name} fold {fold}: history {}", fed.history.checksum());
    }
    let meta = RunMeta {
        run,
        k_folds: k,
        n_centers: datasets.len(),
        rounds: cfg.fl.rounds,
    };
    write(&layout.run_meta(&name), &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"))?;
    Ok(name)
}

/// Scores each center's deployed model on its test partition, fold by fold.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout, run: RunSpec) -> Result<FoldReport, CliError> {
    cfg.validate()?;
    let name = run.name();
    let meta_path = layout.run_meta(&name);
    if !meta_path.exists() {
        return Err(CliError::Data(format!("missing {} (run train first)", meta_path.display())));
    }
    let meta: RunMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
    if meta.k_folds != cfg.eval.k_folds || meta.n_centers != cfg.centers.len() {
        return Err(CliError::Config(format!(
            "`eval.k_folds`/`centers`: run {name} was trained with {} folds over {} centers",
            meta.k_folds, meta.n_centers
        )));
    }
    let datasets = load_datasets(cfg, layout)?;
    let mut collector = FoldCollector::new();
    for (fold, data) in fold_partitions(&datasets, cfg.eval.k_folds, cfg.master_seed)?.into_iter().enumerate() {
        let mut models = Vec::new();
        for test in &data.tests {
            let which = if meta.run.algorithm.is_federated() {
                "global".to_owned()
            } else {
                format!("center{}", test.center_id)
            };
            let w = load_weights(&layout.fold_checkpoint(&name, fold, &which), "run train first")?;
            w.check_against(&cfg.model, &Segment::FL)?;
            models.push(w);
        }
        let refs: Vec<&ModelWeights> = models.iter().collect();
        let r = collector.add_fold(&cfg.model, &refs, &data.tests)?;
        log::info!("{name} fold {fold}: GTA accuracy {:.4}", r.gta.accuracy);
    }
    let report = collector.finish()?;
    write(&layout.fold_report(&name), &report.to_json())?;
    if let Some(pr) = &report.pr {
        write(&layout.pr_points(&name), &pr.to_points_text())?;
    }
    Ok(report)
}

/// Renders the comparison table of the named runs, or of every evaluated run
/// when `runs` is empty.
pub fn report(cfg: &ExperimentConfig, layout: &Layout, runs: &[String]) -> Result<String, CliError> {
    cfg.validate()?;
    let names: Vec<String> = if runs.is_empty() {
        let mut found = Vec::new();
        if layout.reports_dir().is_dir() {
            for entry in fs::read_dir(layout.reports_dir())? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if layout.fold_report(&name).exists() {
                    found.push(name);
                }
            }
        }
        found.sort();
        found
    } else {
        runs.to_vec()
    };
    if names.is_empty() {
        return Err(CliError::Data("no evaluated runs to report (run evaluate first)".into()));
    }
    let mut rows = Vec::new();
    for name in names {
        let path = layout.fold_report(&name);
        if !path.exists() {
            return Err(CliError::Data(format!("missing {} (run evaluate first)", path.display())));
        }
        rows.push((name, FoldReport::from_json(&fs::read_to_string(&path)?)?));
    }
    let text = table::render(&rows);
    write(&layout.table(), &text)?;
    Ok(text)
}
