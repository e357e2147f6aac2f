use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pnlab::{render_heatmap, run_experiment, write_report, ExperimentConfig, ExperimentKind};
use pnlab_core::Field;

#[derive(Parser)]
#[command(name = "pnlab", version, about = "Oscillating-Neumann homogenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Render a field CSV (x1,x2,value) as an SVG heatmap.
    Render { field: PathBuf, out: PathBuf },
    /// List experiment names.
    ListExperiments,
}

/// Exit 0 when every check passes, 1 when one fails.
fn run(config: &PathBuf) -> anyhow::Result<bool> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = cfg.output_path();
    log::info!("running {} into {}", cfg.experiment.name(), dir.display());
    let report = run_experiment(&cfg)?;
    write_report(&report, &dir).with_context(|| format!("writing {}", dir.display()))?;
    for c in &report.checks {
        println!(
            "criterion {:>2} {}: {}: {}",
            c.criterion,
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run(config),
        Command::Render { field, out } => (|| {
            let text = std::fs::read_to_string(field).with_context(|| format!("reading {}", field.display()))?;
            let f = Field::from_csv_str(&text)?;
            render_heatmap(&f, &[], out).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        })(),
        Command::ListExperiments => {
            for k in ExperimentKind::ALL {
                println!("{:<18} {}", k.name(), k.describe());
            }
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
