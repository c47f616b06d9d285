//! `prosody-lab`: generate synthetic corpora, train FVAE/DVAE models and
//! their priors, sample prosody and evaluate it.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime or data error,
//! 3 numerical divergence during training.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use prosody_priors::fvae::PriorMode;
use prosody_priors::pool::default_workers;
use prosody_priors::training::ModelError;

use crate::commands::{EvalInputs, SampleInputs};
use crate::config::{resolve, Overrides, UsageError};

#[derive(Parser)]
#[command(
    name = "prosody-lab",
    version,
    about = "Prosodic latent prior experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Workers {
    /// Worker threads [default: available cores]. Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl Workers {
    fn count(&self) -> anyhow::Result<usize> {
        match self.workers {
            Some(0) => Err(config::usage("--workers must be positive")),
            Some(n) => Ok(n),
            None => Ok(default_workers()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Fvae,
    Dvae,
    Flow,
    ArPrior,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Recon,
    Express,
    Diversity,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its generating process.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model: fvae/dvae on a corpus, flow/ar-prior on latents.
    Train {
        variant: Variant,
        #[command(flatten)]
        common: Common,
        /// Training corpus (fvae, dvae).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Latent dataset from extract-latents (flow, ar-prior).
        #[arg(long)]
        latents: Option<PathBuf>,
        /// Latent dimension (fvae, dvae).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Retrain only the prior of a DVAE checkpoint with the posterior frozen.
    FinetunePrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write the posteriors of an FVAE/DVAE checkpoint over a corpus.
    ExtractLatents {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workers: Workers,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Sample prosody for corpus texts from a prior checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workers: Workers,
        /// ar-prior, flow or dvae checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// FVAE whose decoder renders ar-prior and flow samples.
        #[arg(long)]
        fvae: Option<PathBuf>,
        /// Corpus whose texts are sampled.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Temperatures, comma separated [default: 0.33,0.5,0.8].
        #[arg(long, value_delimiter = ',')]
        temperature: Option<Vec<f64>>,
    },
    /// Compute reconstruction, expressiveness or diversity metrics.
    Eval {
        kind: EvalKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: Workers,
        /// FVAE/DVAE checkpoint (recon).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference corpus (recon; ground-truth row for express).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sample files or directories of them (express, diversity).
        #[arg(long)]
        samples: Vec<PathBuf>,
    },
    /// Merge metrics from eval runs into report tables.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// metrics.json files or eval output directories.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
}

fn seed_only(common: &Common) -> Overrides {
    Overrides {
        seed: common.seed,
        ..Overrides::default()
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { common } => {
            let cfg = resolve(common.config.as_deref(), &seed_only(&common))?;
            commands::gen_data(&cfg, &common.out)
        }
        Command::Train {
            variant,
            common,
            corpus,
            latents,
            dim,
            steps,
        } => {
            let o = Overrides {
                dim,
                steps,
                ..seed_only(&common)
            };
            let cfg_path = common.config.as_deref();
            let only = |flag: &str, present: bool| -> anyhow::Result<()> {
                if present {
                    Err(config::usage(format!(
                        "{flag} does not apply to this variant"
                    )))
                } else {
                    Ok(())
                }
            };
            match variant {
                Variant::Fvae | Variant::Dvae => {
                    only("--latents", latents.is_some())?;
                    let mode = if matches!(variant, Variant::Fvae) {
                        PriorMode::StandardNormal
                    } else {
                        PriorMode::Autoregressive
                    };
                    commands::train_vae(&resolve(cfg_path, &o)?, &corpus, mode, &common.out)
                }
                Variant::Flow => {
                    only("--corpus", corpus.is_some())?;
                    commands::train_flow(&resolve(cfg_path, &o)?, &latents, &common.out)
                }
                Variant::ArPrior => {
                    only("--corpus", corpus.is_some())?;
                    commands::train_ar_prior(&resolve(cfg_path, &o)?, &latents, &common.out)
                }
            }
        }
        Command::FinetunePrior {
            common,
            checkpoint,
            corpus,
            steps,
        } => {
            let o = Overrides {
                steps,
                ..seed_only(&common)
            };
            let cfg = resolve(common.config.as_deref(), &o)?;
            commands::finetune_prior(&cfg, &checkpoint, &corpus, &common.out)
        }
        Command::ExtractLatents {
            common,
            workers,
            checkpoint,
            corpus,
        } => {
            let cfg = resolve(common.config.as_deref(), &seed_only(&common))?;
            commands::extract_latents(&cfg, &checkpoint, &corpus, workers.count()?, &common.out)
        }
        Command::Sample {
            common,
            workers,
            checkpoint,
            fvae,
            corpus,
            temperature,
        } => {
            let o = Overrides {
                temperatures: temperature,
                ..seed_only(&common)
            };
            let cfg = resolve(common.config.as_deref(), &o)?;
            let inputs = SampleInputs {
                checkpoint: &checkpoint,
                fvae: &fvae,
                corpus: &corpus,
            };
            commands::sample(&cfg, inputs, workers.count()?, &common.out)
        }
        Command::Eval {
            kind,
            config,
            out,
            workers,
            checkpoint,
            corpus,
            samples,
        } => {
            let cfg = resolve(config.as_deref(), &Overrides::default())?;
            let inputs = EvalInputs {
                checkpoint: &checkpoint,
                corpus: &corpus,
                samples: &samples,
            };
            match kind {
                EvalKind::Recon => commands::eval_recon(&cfg, inputs, workers.count()?, &out),
                EvalKind::Express => commands::eval_express(&cfg, inputs, &out),
                EvalKind::Diversity => commands::eval_diversity(&cfg, inputs, &out),
            }
        }
        Command::Report {
            config,
            out,
            inputs,
        } => {
            let cfg = resolve(config.as_deref(), &Overrides::default())?;
            commands::report(&cfg, &inputs, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 1;
    }
    let diverged = err
        .chain()
        .any(|e| matches!(e.downcast_ref(), Some(ModelError::Divergence { .. })));
    if diverged {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
