use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbt_cli::commands::{self, RunSpec};
use fedbt_cli::{CliError, ExperimentConfig, Layout};
use fedbt_core::fl::Algorithm;
use fedbt_core::ssl::Pretext;

/// Federated Barlow Twins experiments on synthetic multi-center images.
#[derive(Parser)]
#[command(name = "fedbt", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of every artifact directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct RunArgs {
    /// Overrides `fl.algorithm`.
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Start the encoder from the SSL checkpoint of `--pretext`.
    #[arg(long)]
    ssl_init: bool,
    #[arg(long, default_value = "both")]
    pretext: Pretext,
}

impl RunArgs {
    fn spec(self, cfg: &ExperimentConfig) -> RunSpec {
        RunSpec {
            algorithm: self.algorithm.unwrap_or(cfg.fl.algorithm),
            ssl_init: self.ssl_init.then_some(self.pretext),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate center archives and pseudo archives.
    GenData,
    /// Pretrain the encoder on the pooled pseudo data.
    Pretrain {
        #[arg(long, default_value = "both")]
        pretext: Pretext,
    },
    /// Train one configuration on every cross-validation fold.
    Train(RunArgs),
    /// Score a trained configuration and write its fold report.
    Evaluate(RunArgs),
    /// Print the comparison table of evaluated runs.
    Report {
        /// Run names such as `fl_bt` or `ssl_fl_bt`; all runs when empty.
        runs: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    let layout = Layout::new(&cli.out, &cfg);
    match cli.command {
        Command::GenData => {
            let s = commands::gen_data(&cfg, &layout)?;
            println!("real {:?}  pseudo {:?}  collisions {}", s.real, s.pseudo, s.collisions);
        }
        Command::Pretrain { pretext } => {
            let report = commands::pretrain(&cfg, &layout, pretext)?;
            if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
                println!(
                    "L_SSL {:.4} -> {:.4}, held-out center accuracy {:.3}",
                    first.l_ssl, last.l_ssl, last.holdout_acc
                );
            }
        }
        Command::Train(args) => {
            let name = commands::train(&cfg, &layout, args.spec(&cfg))?;
            println!("trained {name}");
        }
        Command::Evaluate(args) => {
            let spec = args.spec(&cfg);
            let r = commands::evaluate(&cfg, &layout, spec)?;
            println!(
                "{}: GTA accuracy {}",
                spec.name(),
                fedbt_cli::table::format_pm(r.mean.accuracy, r.sd.accuracy)
            );
        }
        Command::Report { runs } => print!("{}", commands::report(&cfg, &layout, &runs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedbt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
