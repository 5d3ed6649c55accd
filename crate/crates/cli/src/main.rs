//! Command-line front end tying simulation, reconstruction, training,
//! autofocus and the benchmark into reproducible experiments.
//!
//! Every run resolves its configuration (file plus flag overrides, flags win)
//! and writes the resolved copy next to its outputs. Exit codes: 0 success,
//! 2 configuration, 3 I/O, 4 divergence, 5 precondition violations.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use conefocus::config::ExperimentConfig;
use conefocus::motion::Axis;
use conefocus::Error;

#[derive(Parser)]
#[command(name = "conefocus", version, about = "Cone-beam CT rigid-motion simulation and autofocus compensation")]
struct Cli {
    /// Experiment configuration file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config and CONEFOCUS_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 guarantees byte-reproducible outputs, 0 uses all
    /// cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom definition and its voxelized ground truth.
    Phantom,
    /// Render projections and the motion metadata of a corrupted scan.
    Simulate {
        /// Motion axis (tx, ty, tz, rx, ry, rz).
        #[arg(long)]
        axis: Option<String>,
        /// Motion amplitude in degrees/mm.
        #[arg(long)]
        amplitude: Option<f64>,
        /// Spline node count for the motion.
        #[arg(long)]
        nodes: Option<usize>,
    },
    /// Reconstruct slices from stored projections (optionally with the stored
    /// motion composed into the geometry).
    Reconstruct {
        /// Projection payload written by `simulate`.
        #[arg(long)]
        projections: Option<PathBuf>,
        /// Motion metadata written by `simulate`; reconstructs the corrupted
        /// geometry when given.
        #[arg(long)]
        motion: Option<PathBuf>,
    },
    /// Generate the dataset, train the slice regressor and write the model.
    Train {
        /// Dataset size override.
        #[arg(long)]
        samples: Option<usize>,
        /// Epoch cap override.
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the generated dataset (one record per sample).
        #[arg(long)]
        save_dataset: bool,
    },
    /// Estimate the annihilating trajectory for a corrupted scan.
    Autofocus {
        /// Objective metric: ent, tv, gt, cnn (plus ent+/tv+/cnn+).
        #[arg(long, default_value = "ent")]
        metric: String,
        /// Projection payload; defaults to the simulate output location.
        #[arg(long)]
        projections: Option<PathBuf>,
        /// Motion metadata of the simulated corruption.
        #[arg(long)]
        motion: Option<PathBuf>,
        /// Optimize all six axes in the clinical sweep order instead of the
        /// single corrupted axis.
        #[arg(long)]
        all_axes: bool,
    },
    /// Run the scenario benchmark over axes and metrics.
    Benchmark {
        /// Also write SVG plots.
        #[arg(long)]
        plots: bool,
    },
    /// Summarize a benchmark results CSV.
    Report {
        /// Results file; defaults to <out>/benchmark/results.csv.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Also write SVG plots.
        #[arg(long)]
        plots: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Serde(_) => 2,
        Error::Io(_) => 3,
        Error::Divergence(_) => 4,
        _ => 5,
    }
}

fn resolve_config(cli: &Cli) -> conefocus::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    let out_dir = cfg
        .output_dir
        .clone()
        .or_else(|| std::env::var_os("CONEFOCUS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.validate()?;
    if cfg.threads > 0 {
        // A failure here means a pool already exists (tests); keep going.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok((cfg, out_dir))
}

fn run(cli: &Cli) -> conefocus::Result<()> {
    let (cfg, out) = resolve_config(cli)?;
    match &cli.command {
        Command::Phantom => commands::cmd_phantom(&cfg, &out),
        Command::Simulate { axis, amplitude, nodes } => {
            let mut cfg = cfg;
            if let Some(a) = axis {
                cfg.motion.axis = Axis::from_label(a)?;
            }
            if let Some(a) = amplitude {
                cfg.motion.amplitude = *a;
            }
            if let Some(n) = nodes {
                cfg.motion.n_nodes = *n;
            }
            commands::cmd_simulate(&cfg, &out)
        }
        Command::Reconstruct { projections, motion } => {
            commands::cmd_reconstruct(&cfg, &out, projections.as_deref(), motion.as_deref())
        }
        Command::Train { samples, epochs, save_dataset } => {
            let mut cfg = cfg;
            if let Some(s) = samples {
                cfg.dataset.n_samples = *s;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            commands::cmd_train_with(&cfg, &out, *save_dataset)
        }
        Command::Autofocus { metric, projections, motion, all_axes } => commands::cmd_autofocus(
            &cfg,
            &out,
            metric,
            projections.as_deref(),
            motion.as_deref(),
            *all_axes,
        ),
        Command::Benchmark { plots } => commands::cmd_benchmark(&cfg, &out, *plots),
        Command::Report { results, plots } => {
            commands::cmd_report(&cfg, &out, results.as_deref(), *plots)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
