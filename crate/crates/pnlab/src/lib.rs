//! Config-driven experiment runner: reads a TOML experiment description,
//! runs the solvers over its parameter lists and writes CSV tables, a JSON
//! summary and SVG heatmaps.

pub mod config;
pub mod experiments;
pub mod render;

use std::path::Path;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use experiments::{run_experiment, Check, ExperimentReport};
pub use render::{heatmap_svg, render_heatmap};

/// Writes every table, SVG and `summary.json` into `dir`, creating it.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in report.tables.iter().chain(&report.svgs) {
        std::fs::write(dir.join(name), body)?;
    }
    let summary = serde_json::to_string_pretty(&report.summary).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("summary.json"), summary + "\n")
}
