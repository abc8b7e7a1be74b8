//! `sparsetrain`: train, sweep, trace and size pre-defined sparse MLPs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sparsetrain", version, about = "Bit-accurate sparse MLP training simulator")]
struct Cli {
    /// TOML run configuration; built-in reference defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for weights, interleavers and the clip study.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and the clip study.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train once and write metrics, summary and parameters.
    Train {
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// One run (or estimate) per value along an axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// `;`-separated values: `8,2,5;10,2,7` for bits, `12.5%;0.25` for
        /// density, `128,32;256,64` for z, `1;2;3` for seed.
        #[arg(long, allow_hyphen_values = true)]
        values: Option<String>,
    },
    /// Simulate the memory access schedule and check it for conflicts.
    Trace {
        /// Also write every access to `trace.csv`.
        #[arg(long)]
        csv: bool,
    },
    /// Hardware resource estimate and device fit.
    Estimate,
    /// Pre-activation clipping, sparse against fully connected.
    Clipstats,
    /// Dump the activation lookup table as CSV.
    LutDump,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Bits,
    Density,
    Z,
    Seed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let threads = cli.threads.max(1);
    match cli.cmd {
        Cmd::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::train(&cfg)
        }
        Cmd::Sweep { axis, values } => {
            let values = values.as_deref();
            match axis {
                Axis::Bits => commands::sweep_bits(&cfg, values, threads),
                Axis::Density => commands::sweep_density(&cfg, values, threads),
                Axis::Z => commands::sweep_z(&cfg, values),
                Axis::Seed => commands::sweep_seed(&cfg, values, threads),
            }
        }
        Cmd::Trace { csv } => commands::trace(&cfg, csv),
        Cmd::Estimate => commands::estimate(&cfg),
        Cmd::Clipstats => commands::clipstats(&cfg, threads),
        Cmd::LutDump => commands::lut_dump(&cfg),
    }
}
