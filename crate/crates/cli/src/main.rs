use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fprune::config::ExperimentConfig;
use fprune::experiment::{self, RunDir};
use fprune::{report, Error};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "fprune", version, about = "Taylor filter pruning experiments on synthetic faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Defaults to <out>/config.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory. Overrides the config's `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads. Computation is single-threaded and deterministic,
    /// so any value above zero behaves like 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Model file to operate on; `explain` takes up to two.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the training and verification datasets.
    GenData,
    /// Train the configured network from scratch.
    Train,
    /// Taylor-prune the trained model (or --checkpoint).
    Prune,
    /// Retrain pruned checkpoints with every configured ladder.
    Retrain,
    /// Verification scores and EERs.
    Eval,
    /// Heatmaps and PSNR between networks.
    Explain,
    /// Plots and a consolidated table from an existing run.
    Report,
    /// Every stage in order.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Version { .. } | Error::Protocol(_) | Error::UnsupportedCoupling(_) => 2,
        Error::MissingInput(_) | Error::Corrupt(_) | Error::Io(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, RunDir), Error> {
    let from_out = cli.out.as_ref().map(|o| o.join("config.toml"));
    let path = match (&cli.config, &from_out) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::Config("pass --config or --out".into())),
    };
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Config("no run directory: pass --out or set `output`".into()))?;
    cfg.output = Some(out.clone());
    Ok((cfg, RunDir::new(out)))
}

fn one_checkpoint(cli: &Cli) -> Result<Option<&Path>, Error> {
    match cli.checkpoint.as_slice() {
        [] => Ok(None),
        [p] => Ok(Some(p)),
        _ => Err(Error::Config("this command takes at most one --checkpoint".into())),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    if cli.command == Command::Report {
        let out = match (&cli.out, &cli.config) {
            (Some(o), _) => o.clone(),
            (None, Some(c)) => ExperimentConfig::load(c)?
                .output
                .ok_or_else(|| Error::Config("no run directory: pass --out".into()))?,
            (None, None) => return Err(Error::Config("pass --out".into())),
        };
        for p in report::report_stage(&RunDir::new(out))? {
            info!("wrote {}", p.display());
        }
        return Ok(());
    }
    let (cfg, run) = load_config(cli)?;
    std::fs::create_dir_all(&run.root)?;
    info!("run {} config {}", run.root.display(), cfg.hash());
    match cli.command {
        Command::GenData => {
            let (t, v) = experiment::gen_data(&cfg, &run)?;
            info!("{} training images, {} verification images", t.len(), v.len());
        }
        Command::Train => {
            let out = experiment::train_stage(&cfg, &run)?;
            info!("trained {} epochs, best epoch {}", out.history.len(), out.best_epoch);
        }
        Command::Prune => {
            let out = experiment::prune_stage(&cfg, &run, one_checkpoint(cli)?)?;
            info!("{} pruning iterations", out.trajectory.records.len().saturating_sub(1));
            for w in &out.trajectory.warnings {
                log::warn!("{w}");
            }
        }
        Command::Retrain => {
            for r in experiment::retrain_stage(&cfg, &run, one_checkpoint(cli)?)? {
                info!("retrained {} at iteration {}", r.variant, r.iteration);
            }
        }
        Command::Eval => {
            for r in experiment::eval_stage(&cfg, &run, one_checkpoint(cli)?)? {
                let eers: Vec<String> = r.metrics.eer.iter().map(|(t, e)| format!("t{t}={:.4}", e.eer)).collect();
                println!(
                    "{} iter {} accuracy {:.4} {}",
                    r.variant,
                    r.iteration,
                    r.metrics.accuracy,
                    eers.join(" ")
                );
            }
        }
        Command::Explain => {
            let trained = run.trained();
            let pair = match cli.checkpoint.as_slice() {
                [] => None,
                [b] => Some((trained.as_path(), b.as_path())),
                [a, b] => Some((a.as_path(), b.as_path())),
                _ => return Err(Error::Config("explain takes at most two --checkpoint".into())),
            };
            for r in experiment::explain_stage(&cfg, &run, pair)? {
                println!(
                    "{} iter {} mean PSNR {:.3} dB",
                    r.variant,
                    r.iteration,
                    r.comparison.mean_psnr()
                );
            }
        }
        Command::Run => {
            experiment::run_pipeline(&cfg, &run)?;
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
