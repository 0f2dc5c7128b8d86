//! Experiment orchestration: dispatch a parsed config to the solvers and
//! experiment harness and serialize the reports.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::experiments::coupling::coupling_error_experiment;
use crate::experiments::moments::moment_suite;
use crate::experiments::rates::chaos_rate_experiment;
use crate::model::{closed_form_reference, ModelSpec};
use crate::particle::solve_particle_system;
use crate::paths::{write_bundle, PathBundle};
use crate::report::{coupling_csv, emit_reports, moments_csv, rates_csv, Manifest, ReportFiles};
use crate::validate::run_all;

/// Outcome of one run: the files written plus the in-memory results.
#[derive(Debug)]
pub struct RunOutcome {
    pub files: ReportFiles,
    pub results: serde_json::Value,
    /// Per-check lines for the validate kind, empty otherwise.
    pub check_lines: Vec<String>,
    /// False when a validate run had failing checks.
    pub all_passed: bool,
}

fn build_model(config: &ExperimentConfig) -> Result<ModelSpec> {
    let spec = ModelSpec::from_config(&config.model, &config.params, config.noise_dim)?;
    if spec.state_dim() != config.state_dim {
        return Err(Error::invalid(format!(
            "model `{}` has state dimension {}, config says {}",
            config.model,
            spec.state_dim(),
            config.state_dim
        )));
    }
    Ok(spec)
}

/// Execute a config and write its reports under `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let out_dir = PathBuf::from(&config.out_dir);
    let manifest = Manifest::new(config);
    match config.kind {
        ExperimentKind::Solve => run_solve(config, &out_dir, manifest),
        ExperimentKind::Rates => {
            let spec = build_model(config)?;
            let report = chaos_rate_experiment(&spec, &config.setup(), &config.n_values)?;
            let results = serde_json::to_value(&report)
                .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
            let files = emit_reports(
                &out_dir,
                &manifest,
                &results,
                &[("rates.csv", rates_csv(&report))],
            )?;
            Ok(RunOutcome {
                files,
                results,
                check_lines: Vec::new(),
                all_passed: true,
            })
        }
        ExperimentKind::Coupling => {
            let spec = build_model(config)?;
            let report = coupling_error_experiment(&spec, &config.setup(), &config.n_values)?;
            let results = serde_json::to_value(&report)
                .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
            let files = emit_reports(
                &out_dir,
                &manifest,
                &results,
                &[("coupling.csv", coupling_csv(&report))],
            )?;
            Ok(RunOutcome {
                files,
                results,
                check_lines: Vec::new(),
                all_passed: true,
            })
        }
        ExperimentKind::Moments => {
            let spec = build_model(config)?;
            let report = moment_suite(&spec, &config.setup(), &config.n_values, config.reruns)?;
            let results = serde_json::to_value(&report)
                .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
            let files = emit_reports(
                &out_dir,
                &manifest,
                &results,
                &[("moments.csv", moments_csv(&report))],
            )?;
            Ok(RunOutcome {
                files,
                results,
                check_lines: Vec::new(),
                all_passed: true,
            })
        }
        ExperimentKind::Validate => {
            let checks = run_all(config.seed)?;
            let all_passed = checks.iter().all(|c| c.passed);
            let check_lines = checks
                .iter()
                .map(|c| {
                    format!(
                        "{} {} - {}",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.detail
                    )
                })
                .collect();
            let results = serde_json::to_value(&checks)
                .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
            let files = emit_reports(&out_dir, &manifest, &results, &[])?;
            Ok(RunOutcome {
                files,
                results,
                check_lines,
                all_passed,
            })
        }
    }
}

fn run_solve(
    config: &ExperimentConfig,
    out_dir: &Path,
    manifest: Manifest,
) -> Result<RunOutcome> {
    let spec = build_model(config)?;
    let grid = config.setup().grid()?;
    let scheme = config.scheme();
    let mut per_n = Vec::new();
    for &n in &config.n_values {
        let bundle = PathBundle::sample(&grid, n, config.scenarios, config.noise_dim, config.seed)?;
        let solution = solve_particle_system(&spec, &bundle, &scheme)?;
        let mut entry = json!({
            "n": n,
            "warnings": solution.warnings(),
        });
        if spec.has_closed_form() {
            let reference = closed_form_reference(&spec, &bundle)?;
            let mut max_y = 0.0f64;
            let mut mean_z = 0.0f64;
            let mut mean_z0 = 0.0f64;
            let mut grad_cells = 0usize;
            for sc in 0..config.scenarios {
                for i in 0..n {
                    for k in 0..=config.steps {
                        let gap: f64 = solution
                            .y(sc, i, k)
                            .iter()
                            .zip(reference.y(sc, i, k))
                            .map(|(a, b)| (a - b).abs())
                            .sum();
                        max_y = max_y.max(gap);
                    }
                    for k in 0..config.steps {
                        mean_z += solution
                            .z(sc, i, k)
                            .iter()
                            .zip(reference.z(sc, i, k))
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f64>();
                        mean_z0 += solution
                            .z0(sc, i, k)
                            .iter()
                            .zip(reference.z0(sc, i, k))
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f64>();
                        grad_cells += 1;
                    }
                }
            }
            entry["max_y_error"] = json!(max_y);
            entry["mean_z_error"] = json!(mean_z / grad_cells as f64);
            entry["mean_z0_error"] = json!(mean_z0 / grad_cells as f64);
        }
        if config.dump_bundle {
            let name = format!("bundle_n{n}.bin");
            std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
                path: out_dir.display().to_string(),
                source: e,
            })?;
            let path = out_dir.join(&name);
            let file = std::fs::File::create(&path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            write_bundle(&bundle, std::io::BufWriter::new(file)).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            entry["bundle_dump"] = json!(name);
        }
        per_n.push(entry);
    }
    let results = json!({ "solve": per_n });
    let files = emit_reports(out_dir, &manifest, &results, &[])?;
    Ok(RunOutcome {
        files,
        results,
        check_lines: Vec::new(),
        all_passed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn temp_dir(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("mfbsde-runner-{tag}-{}", std::process::id()))
    }

    #[test]
    fn zero_solve_reports_zero_error() {
        let dir = temp_dir("solve");
        let text = format!(
            "model = zero\nkind = solve\nK = 8\nn = 8\nM = 2\nseed = 3\nout = {}\n",
            dir.display()
        );
        let config = parse_config(&text).unwrap();
        let outcome = run_experiment(&config).unwrap();
        let max_err = outcome.results["solve"][0]["max_y_error"].as_f64().unwrap();
        assert!(max_err < 1e-10, "max error {max_err}");
        assert!(outcome.files.summary_path.exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rates_run_writes_csv_with_schema() {
        let dir = temp_dir("rates");
        let text = format!(
            "model = martingale\nkind = rates\nK = 8\nn = 8, 16, 32\nM = 4\nn_ref = 64\nR = 2\nseed = 3\nout = {}\n",
            dir.display()
        );
        let config = parse_config(&text).unwrap();
        let outcome = run_experiment(&config).unwrap();
        let csv = std::fs::read_to_string(&outcome.files.csv_paths[0]).unwrap();
        assert!(csv.starts_with(
            "n,error_orderingA,error_orderingB,theo_prop8,theo_thm9,slopeA,slopeB,stderrA,stderrB\n"
        ));
        assert_eq!(csv.lines().count(), 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn reruns_are_byte_identical_modulo_timestamp() {
        let dir = temp_dir("det");
        let text = format!(
            "model = martingale\nkind = rates\nK = 6\nn = 8, 16, 32\nM = 4\nn_ref = 64\nR = 2\nseed = 11\nout = {}\n",
            dir.display()
        );
        let config = parse_config(&text).unwrap();
        run_experiment(&config).unwrap();
        let csv_a = std::fs::read(dir.join("rates.csv")).unwrap();
        let strip = |path: &Path| {
            let body = std::fs::read_to_string(path.join("summary.json")).unwrap();
            body.lines()
                .filter(|l| !l.contains("timestamp"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let summary_a = strip(&dir);
        run_experiment(&config).unwrap();
        let csv_b = std::fs::read(dir.join("rates.csv")).unwrap();
        assert_eq!(csv_a, csv_b, "CSV bodies must be byte-identical");
        assert_eq!(summary_a, strip(&dir));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn coupling_run_writes_csv() {
        let dir = temp_dir("coupling");
        let text = format!(
            "model = linear-mean\nkind = coupling\nK = 6\nn = 8, 16\nM = 2\nn_ref = 64\nseed = 3\nout = {}\n",
            dir.display()
        );
        let config = parse_config(&text).unwrap();
        let outcome = run_experiment(&config).unwrap();
        let csv = std::fs::read_to_string(&outcome.files.csv_paths[0]).unwrap();
        assert!(csv.starts_with("n,y_gap,"));
        assert_eq!(csv.lines().count(), 3);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn moments_run_writes_csv() {
        let dir = temp_dir("moments");
        let text = format!(
            "model = martingale\nkind = moments\nK = 16\nn = 8\nM = 2\nn_ref = 32\np = 2\nreruns = 1\nseed = 3\nout = {}\n",
            dir.display()
        );
        let config = parse_config(&text).unwrap();
        let outcome = run_experiment(&config).unwrap();
        let csv = std::fs::read_to_string(&outcome.files.csv_paths[0]).unwrap();
        assert!(csv.starts_with("statistic,x,value\n"));
        assert!(csv.contains("increment_p2,"));
        assert!(csv.contains("uniform_bound,"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validate_kind_runs_checks() {
        let dir = temp_dir("validate");
        let text = format!("model = zero\nkind = validate\nseed = 5\nout = {}\n", dir.display());
        let config = parse_config(&text).unwrap();
        let outcome = run_experiment(&config).unwrap();
        assert!(outcome.all_passed);
        assert!(!outcome.check_lines.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bundle_dump_round_trips() {
        let dir = temp_dir("dump");
        let text = format!(
            "model = zero\nkind = solve\nK = 6\nn = 4\nM = 2\ndump_bundle = true\nseed = 9\nout = {}\n",
            dir.display()
        );
        let config = parse_config(&text).unwrap();
        run_experiment(&config).unwrap();
        let bytes = std::fs::read(dir.join("bundle_n4.bin")).unwrap();
        let bundle = crate::paths::read_bundle(bytes.as_slice()).unwrap();
        assert_eq!(bundle.num_particles(), 4);
        assert_eq!(bundle.seed(), 9);
        std::fs::remove_dir_all(&dir).ok();
    }
}
