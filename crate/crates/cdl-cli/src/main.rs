//! `cdl`: desk-scale continual-distillation experiments.
//!
//! Subcommands: `gen-data`, `pretrain`, `run`, `grad-check`, `report`.
//! Exit codes: 0 success, 1 run failure, 2 configuration error.

mod config;
mod report;
mod rows;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use cdl_core::CdlError;
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "cdl", version, about = "Deterministic continual-distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic class-incremental dataset (CDLD file).
    GenData {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the frozen backbones on the reserved class block (CDLW files).
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; defaults to <out>/dataset.cdld.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Execute the (seed x method x sweep) run grid and write CSV + summary.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; defaults to <out>/dataset.cdld.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory with student.cdlw / teacher.cdlw; defaults to <out>.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generate missing dataset/backbones instead of erroring.
        #[arg(long)]
        auto_gen: bool,
        /// Worker threads for independent cells (default 1).
        #[arg(long)]
        jobs: Option<usize>,
        /// Train each seed's teacher once and share it across that seed's
        /// cells (bit-identical results, less compute).
        #[arg(long)]
        share_teacher: bool,
        /// Unused here; accepted for interface uniformity.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suite over all registered checks.
    GradCheck {
        /// Name of a check to corrupt (failure-reporting fixture).
        #[arg(long)]
        corrupt: Option<String>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate results.csv into summary tables and curve data.
    Report {
        /// Run directory (or a results.csv path).
        #[arg(long)]
        runs: PathBuf,
        /// Output directory; defaults next to the results.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code_for(err: &CdlError) -> u8 {
    match err {
        CdlError::Config(_) | CdlError::Format(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), CdlError> {
    match cli.cmd {
        Cmd::GenData { config, out, seed } => {
            let cfg = ExperimentConfig::parse_opt(config.as_deref())?;
            runs::cmd_gen_data(&cfg, &out, seed)?;
            Ok(())
        }
        Cmd::Pretrain { config, data, out, seed } => {
            let cfg = ExperimentConfig::parse_opt(config.as_deref())?;
            let data_path = data.unwrap_or_else(|| out.join("dataset.cdld"));
            runs::cmd_pretrain(&cfg, &data_path, &out, seed)
        }
        Cmd::Run { config, data, models, out, auto_gen, jobs, share_teacher, seed: _ } => {
            let cfg = ExperimentConfig::parse_opt(config.as_deref())?;
            let data_path = data.unwrap_or_else(|| out.join("dataset.cdld"));
            let models_dir = models.unwrap_or_else(|| out.clone());
            runs::cmd_run(
                &cfg,
                &data_path,
                &models_dir,
                &out,
                auto_gen,
                jobs.unwrap_or(1),
                share_teacher,
            )
        }
        Cmd::GradCheck { corrupt, out, config: _, seed: _ } => {
            let outcomes = cdl_core::checksuite::gradient_suite(corrupt.as_deref())?;
            let mut text = String::new();
            let mut failed = 0;
            for o in &outcomes {
                let line = format!(
                    "{} {:<38} max rel err {:.3e} (tol {:.0e})",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.name,
                    o.max_rel_err,
                    o.tolerance
                );
                println!("{line}");
                text.push_str(&line);
                text.push('\n');
                failed += u32::from(!o.pass);
            }
            if let Some(path) = out {
                std::fs::write(path, text)?;
            }
            if failed > 0 {
                return Err(CdlError::Numeric(format!("{failed} gradient check(s) failed")));
            }
            Ok(())
        }
        Cmd::Report { runs, out, config: _, seed: _ } => runs::cmd_report(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
