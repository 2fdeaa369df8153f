use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rppgvl::harness::ablate::{ablate, parse_switches};
use rppgvl::harness::inspect::inspect;
use rppgvl::harness::run::{self, TrainOptions};
use rppgvl::harness::TrainConfig;
use rppgvl::synthgen::{read_dataset, Split};
use rppgvl::Error;

#[derive(Parser)]
#[command(name = "rppgvl", version, about = "Self-supervised rPPG on synthetic spatial-temporal maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command (data seed for `synth`, training seed otherwise)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Drop wall-clock fields so reports are byte-reproducible
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (written to --out, or the config's dataset path)
    Synth {
        #[arg(long)]
        force: bool,
    },
    /// Train a model
    Train {
        /// Dataset directory, overriding the config
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Train ablation variants from one seed
    Ablate {
        /// Comma-separated switches: full, no_fc, no_vtc, no_tvr, no_fr, afr,
        /// template=<t>, mask=<b>, k=<n>, templates, mask_sweep, k_sweep
        #[arg(long, value_delimiter = ',', required = true)]
        switches: Vec<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write STMap, contrastive map, mask and reconstruction images for one sample
    Inspect {
        #[arg(long)]
        sample: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn load_config(c: &Common, required: bool) -> Result<TrainConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None if required => return usage("--config is required"),
        None => TrainConfig::new("data"),
    };
    if c.deterministic {
        cfg.train.deterministic = true;
    }
    Ok(cfg)
}

fn checked(cfg: TrainConfig) -> Result<TrainConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    match &c.out {
        Some(p) => Ok(p),
        None => usage("--out is required"),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Synth { force } => {
            let mut cfg = load_config(c, true)?;
            if let Some(s) = c.seed {
                cfg.data.seed = s;
            }
            cfg.data.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let out = c.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            let m = run::synth(&cfg, &out, force)?;
            println!("{}", out.join(rppgvl::synthgen::MANIFEST).display());
            log::info!("{} samples", m.samples.len());
        }
        Cmd::Train { dataset, resume, epochs } => {
            let mut cfg = load_config(c, resume.is_none())?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let out = out_dir(c)?;
            let opts = TrainOptions { resume, ..Default::default() };
            let cfg = if opts.resume.is_some() && c.config.is_none() { cfg } else { checked(cfg)? };
            let ds = read_dataset(&cfg.dataset)?;
            let report = run::train(&cfg, &ds, out, &opts)?;
            for e in &report.eval {
                println!("{:?}: MAE {:.2} RMSE {:.2} rho {:?}", e.split, e.metrics.mae, e.metrics.rmse, e.metrics.pearson_rho);
            }
        }
        Cmd::Eval { checkpoint, dataset, split } => {
            let out = out_dir(c)?;
            let split = if split == "train" { Split::Train } else { Split::Test };
            let r = run::eval_checkpoint(&checkpoint, dataset.as_deref(), split, out)?;
            println!("{:?}: MAE {:.2} RMSE {:.2} rho {:?}", r.split, r.metrics.mae, r.metrics.rmse, r.metrics.pearson_rho);
        }
        Cmd::Ablate { switches, dataset, epochs } => {
            let variants = parse_switches(&switches).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut cfg = load_config(c, true)?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let cfg = checked(cfg)?;
            let out = out_dir(c)?;
            let ds = read_dataset(&cfg.dataset)?;
            for r in ablate(&cfg, &ds, &variants, out)? {
                println!("{}\tMAE {:.2}\trho {:?}", r.variant, r.metrics.mae, r.metrics.pearson_rho);
            }
        }
        Cmd::Inspect { sample, checkpoint, dataset } => {
            let mut cfg = load_config(c, true)?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let cfg = checked(cfg)?;
            let out = out_dir(c)?;
            let ds = read_dataset(&cfg.dataset)?;
            for p in inspect(&cfg, &ds, &sample, checkpoint.as_deref(), out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
