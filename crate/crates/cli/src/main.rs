use std::path::PathBuf;
use std::process::ExitCode;

use adaensemble::model::InferOptions;
use adaensemble::training::render_comparison;
use adaensemble_cli::commands::{self, EvalOptions, TrainOptions};
use adaensemble_cli::{exit_code, CliResult};
use clap::{Args, Parser, Subcommand};

/// Sparse mixture-of-experts click-through model with per-example exit
/// depth.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error,
/// 3 data error, 4 numeric failure.
#[derive(Parser)]
#[command(name = "adaensemble", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit bucketizers and vocabularies on a data file.
    FitPipeline {
        #[arg(long)]
        data: PathBuf,
        /// TOML with `embedding_dim`, `bins`, `min_frequency` and `[[fields]]`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run bi-level training and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// AUC, LogLoss, FLOPs, depth histogram and expert loads.
    Evaluate(EvalArgs),
    /// Expert frequencies, cross-layer routes and exit depths.
    InspectRouting(EvalArgs),
    /// Write a synthetic planted-interaction dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Pipeline to use instead of the one stored in the checkpoint.
    #[arg(long)]
    pipeline: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Field delimiter of the data file.
    #[arg(long, default_value_t = '\t')]
    delimiter: char,
    /// Run every example through all layers.
    #[arg(long)]
    force_full_depth: bool,
    /// Experts per example at every layer, replacing `k_final`.
    #[arg(long)]
    k: Option<usize>,
    /// Also evaluate with all layers forced and print both rows.
    #[arg(long)]
    compare_full_depth: bool,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            checkpoint: self.checkpoint.clone(),
            data: self.data.clone(),
            pipeline: self.pipeline.clone(),
            out_dir: self.out_dir.clone(),
            delimiter: self.delimiter,
            infer: InferOptions {
                k: self.k,
                force_full_depth: self.force_full_depth,
            },
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::FitPipeline { data, features, out_dir } => {
            let out = commands::fit_pipeline(&data, &features, &out_dir)?;
            println!("wrote {}", out.pipeline_path.display());
            for f in &out.summary {
                println!(
                    "{:<16} cardinality {:>8}  oov {:>7.3}%  merged {:>6}",
                    f.name,
                    f.cardinality,
                    100.0 * f.oov_rate,
                    f.merged_levels
                );
            }
        }
        Command::Train {
            config,
            seed,
            max_steps,
            out_dir,
        } => {
            let out = commands::train(&TrainOptions {
                config,
                seed,
                max_steps,
                out_dir,
            })?;
            let last = out.report.history.last();
            println!(
                "trained {} steps, final train logloss {}, best validation logloss {}",
                out.report.history.len(),
                last.map_or("n/a".into(), |r| format!("{:.6}", r.logloss)),
                out.report.best_val_logloss.map_or("n/a".into(), |v| format!("{v:.6}"))
            );
            println!("run directory {}", out.out_dir.display());
        }
        Command::Evaluate(args) => {
            let opts = args.options();
            let report = commands::evaluate_cmd(&opts)?;
            print!("{}", report.render_table());
            if args.compare_full_depth && !args.force_full_depth {
                let mut full = opts.clone();
                full.out_dir = None;
                full.infer.force_full_depth = true;
                let full = commands::evaluate_cmd(&full)?;
                println!();
                print!("{}", render_comparison(&[("w/ controller", &report), ("w/o controller", &full)]));
            }
        }
        Command::InspectRouting(args) => {
            let report = commands::inspect_routing_cmd(&args.options())?;
            print!("{}", commands::render_routing(&report));
        }
        Command::Generate { config, seed, out_dir } => {
            let out = commands::generate(&config, seed, &out_dir)?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            if let Some(c) = out.ceilings[2] {
                println!("test ceiling AUC {c:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit_code::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
