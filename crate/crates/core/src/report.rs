//! Report serialization: CSV tables with fixed schemas and a JSON summary
//! whose manifest round-trips to the config that produced it.
//!
//! Timestamps appear only in the manifest under their own key, so re-running
//! with an identical config and seed reproduces every CSV byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::coupling::CouplingReport;
use crate::experiments::moments::MomentReport;
use crate::experiments::rates::RateReport;

/// Paths of the files one run produced.
#[derive(Debug, Clone, Serialize)]
pub struct ReportFiles {
    pub csv_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub artifact_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch; the only non-deterministic field of a
    /// report.
    pub timestamp: u64,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Manifest {
            seed: config.seed,
            config: config.clone(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(body.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

fn fmt(value: f64) -> String {
    // Shortest round-trip formatting; decimal separator is always '.'.
    format!("{value}")
}

fn opt_slope(fit: &Option<crate::experiments::rates::RateFit>) -> (String, String) {
    match fit {
        Some(f) => (fmt(f.slope), fmt(f.stderr)),
        None => ("NaN".into(), "NaN".into()),
    }
}

/// `rates.csv` with the fixed column set
/// `n,error_orderingA,error_orderingB,theo_prop8,theo_thm9,slopeA,slopeB,stderrA,stderrB`.
pub fn rates_csv(report: &RateReport) -> String {
    let mut out = String::from(
        "n,error_orderingA,error_orderingB,theo_prop8,theo_thm9,slopeA,slopeB,stderrA,stderrB\n",
    );
    let (slope_a, stderr_a) = opt_slope(&report.fit_a);
    let (slope_b, stderr_b) = opt_slope(&report.fit_b);
    for (idx, n) in report.n_values.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            n,
            fmt(report.error_sup_of_mean[idx]),
            fmt(report.error_mean_of_sup[idx]),
            fmt(report.theo_conditional[idx]),
            fmt(report.theo_uniform[idx]),
            slope_a,
            slope_b,
            stderr_a,
            stderr_b,
        ));
    }
    out
}

/// `coupling.csv`: one row per particle count.
pub fn coupling_csv(report: &CouplingReport) -> String {
    let mut out = String::from(
        "n,y_gap,z_gap,z0_gap,offdiag_residual,lhs_uniform,lhs_conditional,w2_uniform,w2_conditional,ratio_uniform,ratio_conditional,per_particle,per_particle_stderr,particle_average,domination_fraction,domination_min_slack\n",
    );
    for entry in &report.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            entry.n,
            fmt(entry.y_gap_sup_mean),
            fmt(entry.z_gap_integrated),
            fmt(entry.z0_gap_integrated),
            fmt(entry.offdiag_residual),
            fmt(entry.lhs_uniform),
            fmt(entry.lhs_conditional),
            fmt(entry.w2_uniform),
            fmt(entry.w2_conditional),
            fmt(entry.ratio_uniform),
            fmt(entry.ratio_conditional),
            fmt(entry.per_particle_stat),
            fmt(entry.per_particle_stderr),
            fmt(entry.particle_average_stat),
            fmt(entry.domination_fraction),
            fmt(entry.domination_min_slack),
        ));
    }
    out
}

/// `moments.csv` in long format: `statistic,x,value`.
pub fn moments_csv(report: &MomentReport) -> String {
    let mut out = String::from("statistic,x,value\n");
    let mut push = |name: &str, x: f64, value: f64| {
        out.push_str(&format!("{name},{},{}\n", fmt(x), fmt(value)));
    };
    for (lag, value) in report.lags.iter().zip(&report.increment_p2) {
        push("increment_p2", *lag, *value);
    }
    for (lag, value) in report.lags.iter().zip(&report.increment_p) {
        push("increment_p", *lag, *value);
    }
    for (span, value) in report.product_span.iter().zip(&report.product) {
        push("product", *span, *value);
    }
    for (lag, value) in report.lags.iter().zip(&report.conditional_sup) {
        push("conditional_sup", *lag, *value);
    }
    for (n, value) in report.uniform_n.iter().zip(&report.uniform_stats) {
        push("uniform_bound", *n as f64, *value);
    }
    out
}

/// Write the summary JSON plus any CSV bodies into `directory`.
pub fn emit_reports(
    directory: &Path,
    manifest: &Manifest,
    results: &serde_json::Value,
    csv_bodies: &[(&str, String)],
) -> Result<ReportFiles> {
    fs::create_dir_all(directory).map_err(io_err(directory))?;
    let mut csv_paths = Vec::new();
    for (name, body) in csv_bodies {
        let path = directory.join(name);
        write_text(&path, body)?;
        csv_paths.push(path);
    }
    let summary = serde_json::json!({
        "manifest": manifest,
        "results": results,
    });
    let summary_path = directory.join("summary.json");
    let body = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Internal(format!("summary serialization failed: {e}")))?;
    write_text(&summary_path, &(body + "\n"))?;
    Ok(ReportFiles {
        csv_paths,
        summary_path,
    })
}
