//! `bitbench`: command-line harness over the kernels, estimators and metrics.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Precision, RunConfig};

#[derive(Parser)]
#[command(name = "bitbench", version, about = "Binarized network kernels and benchmark metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run config TOML, or a manifest from an earlier run.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Comma-separated ids, e.g. `fp,bnn,xnor++`.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// two_moons, blobs, textures or csv.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Packed xnor/popcount GEMM against a scalar float GEMM.
    KernelBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// BBT1 activation operand.
        #[arg(long, requires = "w")]
        a: Option<PathBuf>,
        /// BBT1 weight operand.
        #[arg(long, requires = "a")]
        w: Option<PathBuf>,
    },
    /// Train the FP twin and each binarized model once.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Hyperparameter grid per algorithm; reports accuracy spread.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Corruption gaps of trained models under Gaussian noise.
    Robust {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Binarization error of attention, bottleneck and MLP structures.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated: attention, cnn, mlp.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
    },
    /// Parameter/FLOP counts and theoretical ratios of a ModelSpec.
    Complexity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<String>>,
    },
    /// Algorithm x library deployability grid.
    DeployCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Recompute overall metrics from metric tables.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table1: Option<PathBuf>,
        #[arg(long)]
        table2: Option<PathBuf>,
        #[arg(long)]
        corruption: Option<PathBuf>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s}")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::KernelBench { .. } => "kernel-bench",
            Command::Train { .. } => "train",
            Command::Sweep { .. } => "sweep",
            Command::Robust { .. } => "robust",
            Command::Probe { .. } => "probe",
            Command::Complexity { .. } => "complexity",
            Command::DeployCheck { .. } => "deploy-check",
            Command::Metrics { .. } => "metrics",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::KernelBench { common, .. }
            | Command::Train { common, .. }
            | Command::Sweep { common, .. }
            | Command::Robust { common, .. }
            | Command::Probe { common, .. }
            | Command::Complexity { common, .. }
            | Command::DeployCheck { common, .. }
            | Command::Metrics { common, .. } => common,
        }
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) -> anyhow::Result<()> {
    if let Some(a) = &f.algorithms {
        cfg.binarizer.algorithms = a.clone();
    }
    if let Some(e) = f.epochs {
        cfg.training.epochs = e;
    }
    if let Some(lr) = f.lr {
        cfg.training.learning_rate = lr;
    }
    if let Some(b) = f.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(d) = &f.dataset {
        cfg.dataset.source = toml::Value::String(d.clone())
            .try_into()
            .map_err(|_| anyhow::anyhow!("--dataset: unknown source {d}"))?;
    }
    if let Some(p) = &f.data_path {
        cfg.dataset.path = Some(p.clone());
    }
    if let Some(n) = f.points {
        cfg.dataset.n = n;
    }
    Ok(())
}

/// File values first, then flags.
fn resolve(cmd: &Command) -> anyhow::Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output = Some(std::path::absolute(o)?);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    match cmd {
        Command::KernelBench {
            sizes,
            reps,
            warmup,
            m,
            k,
            a,
            w,
            ..
        } => {
            let b = &mut cfg.bench;
            if let Some(v) = sizes {
                b.sizes = v.clone();
            }
            b.repetitions = reps.unwrap_or(b.repetitions);
            b.warmup = warmup.unwrap_or(b.warmup);
            b.m = m.unwrap_or(b.m);
            b.k = k.unwrap_or(b.k);
            if a.is_some() {
                b.a = a.clone();
                b.w = w.clone();
            }
        }
        Command::Train { flags, .. } | Command::Sweep { flags, .. } | Command::Robust { flags, .. } => {
            apply_train_flags(&mut cfg, flags)?;
        }
        Command::Probe { seeds, kinds, .. } => {
            cfg.probe.seeds = seeds.unwrap_or(cfg.probe.seeds);
            if let Some(k) = kinds {
                cfg.probe.kinds = k
                    .iter()
                    .map(|s| s.parse().map_err(|e| anyhow::anyhow!("--kinds: {e}")))
                    .collect::<anyhow::Result<_>>()?;
            }
        }
        Command::Complexity { spec, algorithms, .. } => {
            if spec.is_some() {
                cfg.complexity.spec = spec.clone();
            }
            if let Some(a) = algorithms {
                cfg.binarizer.algorithms = a.clone();
            }
        }
        Command::DeployCheck { data, .. } => {
            if data.is_some() {
                cfg.deploy.data = data.clone();
            }
        }
        Command::Metrics {
            table1,
            table2,
            corruption,
            ..
        } => {
            let m = &mut cfg.metrics;
            for (dst, src) in [(&mut m.table1, table1), (&mut m.table2, table2), (&mut m.corruption, corruption)] {
                if src.is_some() {
                    *dst = src.clone();
                }
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let config_label = cli
        .command
        .common()
        .config
        .as_ref()
        .map_or_else(|| "<defaults>".to_owned(), |p| p.display().to_string());
    let outcome = resolve(&cli.command).and_then(|cfg| commands::run(name, &cfg, cli.command.common().config.as_deref()));
    match outcome {
        Ok(run) if run.failures.is_empty() => {
            println!("{name}: wrote {}", run.dir.display());
            ExitCode::SUCCESS
        }
        Ok(run) => {
            for f in &run.failures {
                eprintln!("{name} (config {config_label}): {f}");
            }
            eprintln!("{name}: {} run(s) failed; partial results in {}", run.failures.len(), run.dir.display());
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{name} (config {config_label}): {e:#}");
            ExitCode::FAILURE
        }
    }
}
