mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "repinv", version, about = "Invert classifier representations with conditional pixel models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set classifier.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and write scheduled checkpoints.
    TrainClassifier {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a conditional inverter for one layer of a trained classifier.
    TrainInverter {
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the squared-error reconstruction baseline for one layer.
    TrainMse {
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw inversion samples for a few held-out images.
    Sample {
        #[arg(long)]
        layer: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate an information quantity for one layer.
    EstimateMi {
        /// nce, binning, kraskov or kde.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        layer: Option<String>,
        /// Neighbour count for kraskov.
        #[arg(long)]
        k: Option<usize>,
        /// Number of examples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Representation-space nearest-neighbour table.
    NnTable {
        #[command(flatten)]
        common: Common,
    },
    /// Closest inversion samples to one image.
    Topk {
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// NCE over classifier checkpoints for the regular and overfit regimes.
    Dynamics {
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Tile dataset images into a PGM/PPM grid.
    Grid {
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v.clone())?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.set("out", out.display().to_string())?;
    }
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::TrainClassifier { variant, max_steps, common } => {
            let cfg = resolve(&common, &[("classifier.variant", variant), ("classifier.max_steps", s(&max_steps))])?;
            c::train_classifier(&cfg, "train-classifier")
        }
        Command::TrainInverter { layer, max_steps, common } => {
            let cfg = resolve(&common, &[("inverter.layer", layer), ("inverter.max_steps", s(&max_steps))])?;
            c::train_inverter(&cfg, "train-inverter")
        }
        Command::TrainMse { layer, max_steps, common } => {
            let cfg = resolve(&common, &[("inverter.layer", layer), ("mse.max_steps", s(&max_steps))])?;
            c::train_mse(&cfg, "train-mse")
        }
        Command::Sample { layer, common } => {
            let cfg = resolve(&common, &[("inverter.layer", layer)])?;
            c::sample(&cfg, "sample")
        }
        Command::EstimateMi { kind, layer, k, n, bins, common } => {
            let cfg = resolve(
                &common,
                &[
                    ("eval.kind", kind),
                    ("inverter.layer", layer),
                    ("eval.k", s(&k)),
                    ("eval.n", s(&n)),
                    ("eval.bins", s(&bins)),
                ],
            )?;
            c::estimate_mi(&cfg, "estimate-mi")
        }
        Command::NnTable { common } => c::nn_table(&resolve(&common, &[])?, "nn-table"),
        Command::Topk { layer, index, pool, k, common } => {
            let cfg = resolve(
                &common,
                &[("inverter.layer", layer), ("eval.index", s(&index)), ("eval.pool", s(&pool)), ("eval.topk", s(&k))],
            )?;
            c::topk(&cfg, "topk")
        }
        Command::Dynamics { workers, common } => {
            c::dynamics(&resolve(&common, &[("eval.workers", s(&workers))])?, "dynamics")
        }
        Command::Grid { rows, cols, common } => {
            c::grid(&resolve(&common, &[("eval.rows", s(&rows)), ("eval.cols", s(&cols))])?, "grid")
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("repinv: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
