//! Batch entry points for the segmentation engine.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numerical
//! abort, 5 failed gradient check.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mkis", version, about = "Multi-kernel image segmentation: train, evaluate and inspect models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 forces the deterministic path, 0 uses every core)
    #[arg(long, global = true, env = "MKIS_THREADS")]
    pub threads: Option<usize>,
    /// Compute in 64-bit
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set model.width=16`
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a manifest (augmented on the fly by default)
    Train {
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Train on the source images only
        #[arg(long)]
        no_augment: bool,
        /// Continue from a checkpoint
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a saved model on a test manifest
    Eval {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
    },
    /// Segment a single image
    Predict {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
    },
    /// Parameter count, size, multiply-adds and receptive field of a configuration
    Summary {
        /// Input resolution, HxW
        #[arg(long, default_value = "584x565")]
        res: String,
    },
    /// Finite-difference check of every differentiable op and the full network
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Coordinates sampled per network tensor
        #[arg(long, default_value_t = 6)]
        coords: usize,
        #[arg(long, hide = true)]
        broken: bool,
    },
    /// Write the augmented training set to disk
    Augment {
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        rotations: Option<usize>,
        #[arg(long)]
        brightness: Option<usize>,
        /// Write into a non-empty output directory
        #[arg(long)]
        force: bool,
        /// Only print how many images would be produced
        #[arg(long)]
        count_only: bool,
    },
}

fn split_set(item: &str) -> Result<(String, String), CliError> {
    item.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {item:?}")))
}

/// Command-specific flags as configuration overrides; they win over `--set`.
fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let g = &cli.global;
    let mut o: Vec<(String, String)> = g.set.iter().map(|s| split_set(s)).collect::<Result<_, _>>()?;
    let mut put = |k: &str, v: String| o.push((k.to_string(), v));
    if let Some(s) = g.seed {
        put("run.seed", s.to_string());
    }
    if let Some(t) = g.threads {
        put("run.threads", t.to_string());
    }
    if g.f64 {
        put("run.f64", "true".into());
    }
    if let Some(p) = &g.out {
        put("run.out", p.display().to_string());
    }
    match &cli.command {
        Command::Train {
            manifest,
            epochs,
            max_steps,
            lr,
            batch_size,
            no_augment,
            ..
        } => {
            if let Some(m) = manifest {
                put("data.train_manifest", m.display().to_string());
            }
            if let Some(e) = epochs {
                put("train.epochs", e.to_string());
            }
            if let Some(s) = max_steps {
                put("train.max_steps", s.to_string());
            }
            if let Some(l) = lr {
                put("train.learning_rate", l.to_string());
            }
            if let Some(b) = batch_size {
                put("train.batch_size", b.to_string());
            }
            if *no_augment {
                put("data.augment", "false".into());
            }
        }
        Command::Augment {
            rotations, brightness, ..
        } => {
            if let Some(r) = rotations {
                put("augment.rotations", r.to_string());
            }
            if let Some(b) = brightness {
                put("augment.brightness_variants", b.to_string());
            }
        }
        _ => {}
    }
    // a later duplicate replaces an earlier one
    let mut seen = std::collections::HashSet::new();
    let mut deduped: Vec<(String, String)> = o.into_iter().rev().filter(|(k, _)| seen.insert(k.clone())).collect();
    deduped.reverse();
    Ok(deduped)
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides(cli)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    use commands::*;
    match &cli.command {
        Command::Train { resume, .. } => {
            cfg.echo()?;
            train(cfg, &TrainOptions { resume: resume.clone() })
        }
        Command::Eval { model, manifest } => {
            cfg.echo()?;
            eval(
                cfg,
                &EvalOptions {
                    model: model.clone(),
                    manifest: manifest.clone(),
                },
            )
        }
        Command::Predict { model, image } => {
            cfg.echo()?;
            predict(
                cfg,
                &PredictOptions {
                    model: model.clone(),
                    image: image.clone(),
                },
            )
        }
        Command::Summary { res } => {
            cfg.echo()?;
            print!("{}", summary(cfg, res)?);
            Ok(())
        }
        Command::Gradcheck { size, coords, broken } => {
            cfg.echo()?;
            let opts = GradcheckOptions {
                size: *size,
                coords: *coords,
                broken: *broken,
            };
            print!("{}", gradcheck(cfg, &opts)?);
            Ok(())
        }
        Command::Augment {
            manifest,
            force,
            count_only,
            ..
        } => {
            let opts = AugmentOptions {
                manifest: manifest.clone(),
                force: *force,
                count_only: *count_only,
            };
            check_augment_target(cfg, &opts)?;
            cfg.echo()?;
            let n = augment(cfg, &opts)?;
            println!("{n}");
            Ok(())
        }
    }
}
