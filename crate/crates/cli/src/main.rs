use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camseg_core::autoencoder::Bottleneck;
use camseg_core::config::RunConfig;
use camseg_core::pipeline::{self, RunPaths};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

/// Semantic segmentation as conditional latent generation.
#[derive(Parser)]
#[command(name = "camseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    Kl,
    Vq,
}

impl From<Arm> for Bottleneck {
    fn from(a: Arm) -> Self {
        match a {
            Arm::Kl => Bottleneck::Kl,
            Arm::Vq => Bottleneck::Vq,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/val dataset.
    GenData,
    /// Train one autoencoder arm on semantic and RGB images.
    TrainVae {
        #[arg(long, value_enum, default_value_t = Arm::Kl)]
        arm: Arm,
    },
    /// Train the transformer and diffusion head on frozen latents.
    TrainModel,
    /// Predict semantic images and class masks for PNG files or directories.
    Infer {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Progressive unmasking rounds (1 = single full-mask pass).
        #[arg(long)]
        ar_steps: Option<usize>,
    },
    /// Score predictions on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        ar_steps: Option<usize>,
    },
    /// Evaluate under each corruption setting of a sweep file.
    CorruptSweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sweep file; defaults to `eval.sweep` from the config.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        ar_steps: Option<usize>,
        /// Also write plain x/y columns for plotting.
        #[arg(long)]
        emit_gnuplot_data: bool,
    },
    /// Compare KL and VQ reconstructions of validation semantic images.
    CompareVae {
        #[arg(long)]
        kl: Option<PathBuf>,
        #[arg(long)]
        vq: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CAMSEG_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("CAMSEG_THREADS={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("CAMSEG_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run<T: camseg_core::Float>(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(&cli.common.out);
    let force = cli.common.force;
    let ar = |k: &Option<usize>| k.unwrap_or(cfg.eval.ar_steps);
    match &cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(cfg, &paths, force)?;
            for s in &m.splits {
                info!("{}: {} scenes", s.name, s.count);
            }
        }
        Command::TrainVae { arm } => {
            let r = pipeline::train_vae::<T>(cfg, &paths, (*arm).into(), force)?;
            println!("validation macro-F1 {:.2}", r.val_f1);
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::TrainModel => {
            let r = pipeline::train_pipeline_model::<T>(cfg, &paths, force)?;
            if let Some(last) = r.log.last() {
                println!("final loss {:.5}", last.loss);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Infer {
            inputs,
            checkpoint,
            ar_steps,
        } => {
            let written = pipeline::infer::<T>(cfg, &paths, checkpoint.as_deref(), inputs, ar(ar_steps))?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            split,
            ar_steps,
        } => {
            let r = pipeline::eval::<T>(cfg, &paths, checkpoint.as_deref(), split, ar(ar_steps))?;
            print!("{}", std::fs::read_to_string(&r.summary_path)?);
        }
        Command::CorruptSweep {
            checkpoint,
            sweep,
            ar_steps,
            emit_gnuplot_data,
        } => {
            let sweep = sweep
                .clone()
                .or_else(|| cfg.eval.sweep.clone())
                .context("no sweep file: pass --sweep or set eval.sweep")?;
            let r = pipeline::corrupt_sweep::<T>(cfg, &paths, checkpoint.as_deref(), &sweep, ar(ar_steps), *emit_gnuplot_data)?;
            for s in &r.skipped {
                eprintln!("skipped: {s}");
            }
            print!("{}", std::fs::read_to_string(&r.csv_path)?);
        }
        Command::CompareVae { kl, vq } => {
            let r = pipeline::compare_vae::<T>(cfg, &paths, kl.as_deref(), vq.as_deref())?;
            for a in &r.arms {
                println!("{} macro-F1 {:.2}", a.arm, a.f1_macro);
            }
            println!("gap (kl - vq) {:+.2}", r.gap);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads()?;
    let cfg = load_config(&cli.common)?;
    ensure_out(&cli.common.out)?;
    match cli.common.precision {
        Precision::F32 => run::<f32>(&cli, &cfg),
        Precision::F64 => run::<f64>(&cli, &cfg),
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}
