use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covsel::pipeline::{self, PipelineError, ResolvedConfig, RunContext};
use serde_json::json;

/// Model-free covariate selection: simulate PK profiles, learn a latent
/// representation and rank covariates along a LASSO path.
#[derive(Debug, Parser)]
#[command(name = "covsel", version)]
struct Cli {
    /// JSON config; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train.csv and test.csv.
    Simulate,
    /// Train the VAE; writes model.json and history.csv.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Reconstruction metrics on held-out profiles.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Posterior means and log-variances per subject.
    Encode {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Regularization path from covariates to latent means.
    FitLasso {
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// report.md and figure data.
    Report {
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Every stage in order.
    Run,
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>, PipelineError> {
    let resolved = match &cli.config {
        Some(path) => ResolvedConfig::load(path)?,
        None => ResolvedConfig::default(),
    };
    let ctx = RunContext::new(resolved, cli.out)?;
    match cli.command {
        Command::Simulate => pipeline::cmd_simulate(&ctx),
        Command::Train { train } => pipeline::cmd_train(&ctx, train.as_deref()),
        Command::Evaluate { model, test } => pipeline::cmd_evaluate(&ctx, model.as_deref(), test.as_deref()),
        Command::Encode { model, dataset } => pipeline::cmd_encode(&ctx, model.as_deref(), dataset.as_deref()),
        Command::FitLasso { latents, dataset } => {
            pipeline::cmd_fit_lasso(&ctx, latents.as_deref(), dataset.as_deref())
        }
        Command::Report { path, metrics } => pipeline::cmd_report(&ctx, path.as_deref(), metrics.as_deref()),
        Command::Run => pipeline::cmd_run(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COVSEL_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut body = json!({"kind": e.kind(), "message": e.to_string()});
            if let PipelineError::Config { field, .. } = &e {
                body["field"] = json!(field);
            }
            eprintln!("{}", json!({ "error": body }));
            ExitCode::from(2)
        }
    }
}
