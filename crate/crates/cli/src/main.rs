use std::path::PathBuf;
use std::process::ExitCode;

use budgetlm::analysis::report;
use budgetlm::cells::{CellKind, GateCoupling, StateDropVariant};
use budgetlm::Result;
use budgetlm_cli::*;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "budgetlm", version, about = "Recurrent language models under fixed parameter budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model into a fresh run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from latest.ckpt in an existing run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and print a result record.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text to score with the run's vocabulary; defaults to a split of the run's corpus.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long)]
        unroll: Option<usize>,
        /// Dropout samples to average; 0 uses the mean-field network.
        #[arg(long, default_value_t = 0)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tune hyperparameters with batched GP-EI.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the best configuration under several seeds.
    Rerun {
        #[arg(long, conflicts_with = "config")]
        study: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scatter series of trials near the best one.
    Sensitivity {
        #[arg(long)]
        study: PathBuf,
        /// Window width as a fraction of each dimension's range.
        #[arg(long, default_value_t = 0.2)]
        window: f64,
        /// Objective margin for the near-best fraction.
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate every result under a directory.
    Report {
        dir: PathBuf,
        /// Also write the table as TSV.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Finite-difference check of a tiny model.
    Gradcheck {
        #[arg(long, default_value = "lstm")]
        cell: CellKind,
        #[arg(long, default_value = "capped")]
        coupling: GateCoupling,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value = "variational")]
        variant: StateDropVariant,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, out, resume } => {
            let cfg = load_config(&config)?;
            let summary = train_run(&cfg, seed, &resolve_out(&out), resume)?;
            print!("{}", summary.result.to_record());
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            batch_size,
            unroll,
            mc_samples,
            seed,
        } => {
            let checkpoint = if checkpoint.is_dir() { default_checkpoint(&checkpoint) } else { checkpoint };
            let result = evaluate_checkpoint(&EvaluateArgs {
                checkpoint,
                data,
                split,
                batch_size,
                unroll,
                mc_samples,
                seed,
            })?;
            print!("{}", result.to_record());
        }
        Command::Tune {
            config,
            space,
            trials,
            parallel,
            seed,
            out,
        } => {
            let outcome = tune(&TuneArgs {
                config,
                space,
                trials,
                parallel,
                seed,
                out: resolve_out(&out),
            })?;
            let done = outcome.trials.iter().filter(|t| t.objective.is_some()).count();
            println!("trials\t{}\ncomplete\t{done}", outcome.trials.len());
            if let Some(b) = outcome.best {
                println!("best_trial\t{}\nbest_valid_nll\t{}", b.id, b.objective.unwrap_or(f64::NAN));
            }
        }
        Command::Rerun {
            study,
            config,
            seeds,
            parallel,
            out,
        } => {
            let (stats, level) = rerun(&RerunArgs {
                study,
                config,
                seeds,
                parallel,
                out: resolve_out(&out),
            })?;
            print!("{}", stats.to_record(level));
        }
        Command::Sensitivity {
            study,
            window,
            margin,
            out,
        } => {
            print!(
                "{}",
                sensitivity(&SensitivityArgs {
                    study,
                    window,
                    margin,
                    out: resolve_out(&out),
                })?
            );
        }
        Command::Report { dir, tsv } => {
            let table = report(&dir)?;
            print!("{}", table.to_text());
            if let Some(path) = tsv {
                std::fs::write(path, table.to_tsv())?;
            }
        }
        Command::Gradcheck {
            cell,
            coupling,
            depth,
            variant,
            seed,
        } => {
            let r = gradcheck(&GradcheckArgs {
                cell,
                coupling,
                depth,
                variant,
                seed,
            })?;
            println!(
                "max_relative_error\t{}\ncoordinates\t{}\npassed\t{}",
                r.max_relative_error, r.coordinates, r.passed
            );
            return Ok(r.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
