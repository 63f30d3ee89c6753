use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use diffce::config::load_config;
use diffce::pipeline::{Experiment, Outcome, Stage};

/// Counterfactual examples from guided diffusion, with the adversarial
/// training ladder and evaluation around them.
#[derive(Parser)]
#[command(name = "diffce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit (or materialize) the data score model.
    TrainScore(Common),
    /// Train the classifier ladder over the configured budgets.
    TrainClassifier(Common),
    /// Generate the CE datasets.
    GenCe(Common),
    /// Compute every enabled metric.
    Eval(Common),
    /// Classify test points by lowest average CE distance.
    CeClassify(Common),
    /// Render CSV and SVG reports from existing evaluation outputs.
    Report(Common),
    /// Run the full pipeline.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "artifacts")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Accept a directory produced by a different config and recompute
    /// stale stages.
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    if let Ok(n) = std::env::var("DIFFCE_THREADS") {
        let n: usize = n.parse().context("DIFFCE_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }

    let cli = Cli::parse();
    let (targets, common): (&[Stage], Common) = match cli.command {
        Command::TrainScore(c) => (&[Stage::Score], c),
        Command::TrainClassifier(c) => (&[Stage::Classifiers], c),
        Command::GenCe(c) => (&[Stage::Ce], c),
        Command::Eval(c) => (&[Stage::Eval], c),
        Command::CeClassify(c) => (&[Stage::CeClassify], c),
        Command::Report(c) => (&[Stage::Report], c),
        Command::Run(c) => (&Stage::ALL, c),
    };

    let mut cfg = load_config(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let exp = Experiment::open(cfg, &common.out, common.resume).map_err(|e| {
        let hint = matches!(e, diffce::Error::Provenance { .. });
        let e = anyhow::Error::from(e);
        if hint {
            e.context("artifact directory belongs to another config; pass --resume to recompute it")
        } else {
            e
        }
    })?;
    println!("config digest {}", exp.digest());
    for (stage, outcome) in exp.run(targets)? {
        let what = match outcome {
            Outcome::Ran => "done",
            Outcome::Cached => "cached",
        };
        println!("{:<12} {what}", stage.name());
    }
    println!("artifacts in {}", exp.dir().display());
    Ok(())
}
