//! Command-line front end for the sparse-training laboratory.
//!
//! Verbs: `run` (execute an experiment config), `plan` (print the pruning
//! plan without training), `report` (re-emit tables and memory accounting
//! from artifacts), `verify` (re-check checksums and mask invariants).
//! The PRUNELAB_OUT environment variable overrides the output root.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prunelab_core::config::{parse_config, ExperimentConfig};
use prunelab_core::harness::{build_plan, emit_table, experiment_name, report_dir, run_experiment, verify_dir};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Sparse-training laboratory for pruning techniques")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Replace the config's seed list (comma separated).
    #[arg(long, value_name = "SEEDS")]
    seed: Option<String>,
    /// Replace the config's target sparsity (must be on the ladder).
    #[arg(long, value_name = "S")]
    target_sparsity: Option<f64>,
    /// Replace the config's technique.
    #[arg(long, value_name = "NAME")]
    technique: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the pruning plan for a config without training.
    Plan {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rebuild tables and memory reports from an artifact directory.
    Report { dir: PathBuf },
    /// Re-check artifact checksums and mask invariants.
    Verify { dir: PathBuf },
}

fn load_config(path: &PathBuf, overrides: &Overrides) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(seeds) = &overrides.seed {
        let parsed: Result<Vec<u64>, _> = seeds.split(',').map(|s| s.trim().parse()).collect();
        cfg.seeds = parsed.map_err(|e| format!("--seed: {e}"))?;
    }
    if let Some(target) = overrides.target_sparsity {
        cfg.target_sparsity = target;
    }
    if let Some(technique) = &overrides.technique {
        cfg.technique =
            prunelab_core::plan::Technique::parse(technique).map_err(|e| e.to_string())?;
    }
    if let Ok(root) = std::env::var("PRUNELAB_OUT") {
        if !root.is_empty() {
            cfg.out_dir = PathBuf::from(root);
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let name = experiment_name(&cfg);
            eprintln!(
                "running {name}: {} seed(s) into {}",
                cfg.seeds.len(),
                cfg.out_dir.display()
            );
            let table = run_experiment(&cfg).map_err(|e| e.to_string())?;
            print!("{}", emit_table(&table));
            Ok(())
        }
        Command::Plan { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let plan = build_plan(&cfg).map_err(|e| e.to_string())?;
            print!("{plan}");
            Ok(())
        }
        Command::Report { dir } => {
            let output = report_dir(&dir).map_err(|e| e.to_string())?;
            print!("{}", emit_table(&output.table));
            for (name, report) in &output.memory_sections {
                println!("\n[{name}]");
                print!("{}", report.render());
            }
            Ok(())
        }
        Command::Verify { dir } => {
            let report = verify_dir(&dir).map_err(|e| e.to_string())?;
            print!("{}", report.render());
            if report.ok() {
                Ok(())
            } else {
                Err("verification failed".to_string())
            }
        }
    }
}
