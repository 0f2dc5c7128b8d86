//! Line-oriented `key = value` experiment configuration.
//!
//! Lists are comma separated, `#` starts a comment, unknown keys and
//! duplicate keys are rejected with the offending line number. Defaults are
//! filled for everything except the model name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backward::{MeasureTiming, SchemeConfig};
use crate::error::{Error, Result};
use crate::experiments::ExperimentSetup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    Rates,
    Coupling,
    Moments,
    Validate,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::Rates => "rates",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::Moments => "moments",
            ExperimentKind::Validate => "validate",
        };
        write!(f, "{name}")
    }
}

/// A fully resolved experiment description; serializing and re-reading the
/// manifest reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: String,
    /// Model parameters (`a`, `b`, `c`).
    pub params: BTreeMap<String, f64>,
    pub horizon: f64,
    pub steps: usize,
    pub noise_dim: usize,
    pub state_dim: usize,
    pub n_values: Vec<usize>,
    pub scenarios: usize,
    pub reference_particles: usize,
    pub replicas: usize,
    pub moment_order: f64,
    pub basis_degree: u32,
    pub inner_iterations: usize,
    pub ridge_factor: f64,
    pub smoothing_degree: Option<u32>,
    pub refinement_passes: usize,
    pub measure_timing: MeasureTiming,
    pub alpha: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub out_dir: String,
    pub dump_bundle: bool,
    pub reruns: usize,
}

impl ExperimentConfig {
    pub fn scheme(&self) -> SchemeConfig {
        SchemeConfig {
            basis_degree: self.basis_degree,
            inner_iterations: self.inner_iterations,
            ridge_factor: self.ridge_factor,
            measure_timing: self.measure_timing,
            smoothing_degree: self.smoothing_degree,
            refinement_passes: self.refinement_passes,
        }
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            horizon: self.horizon,
            steps: self.steps,
            scenarios: self.scenarios,
            reference_particles: self.reference_particles,
            replicas: self.replicas,
            moment_order: self.moment_order,
            seed: self.seed,
            scheme: self.scheme(),
            alpha: self.alpha,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

/// Raw `key = (line, value)` pairs with duplicate detection.
struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: line_no,
                    key: line.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    key,
                    message: "empty key".into(),
                });
            }
            if let Some((previous, _)) = entries.get(&key) {
                return Err(Error::Parse {
                    line: line_no,
                    key,
                    message: format!("duplicate key (first set on line {previous})"),
                });
            }
            entries.insert(key, (line_no, value));
        }
        Ok(RawConfig { entries })
    }

    fn override_value(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, line: usize, value: &str, what: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::Parse {
        line,
        key: key.to_string(),
        message: format!("`{value}` is not a valid {what}"),
    })
}

fn parse_list(key: &str, line: usize, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|item| parse_as::<usize>(key, line, item.trim(), "integer"))
        .collect()
}

/// Parse a config file into a fully defaulted [`ExperimentConfig`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    finalize_config(RawConfig::parse(text)?, None, None)
}

/// Parse with command-line overrides and an optional environment seed. The
/// environment seed applies only when neither the file nor a flag set one.
pub fn parse_config_with_overrides(
    text: &str,
    overrides: &[(String, String)],
    seed_flag: Option<u64>,
    env_seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text)?;
    for (key, value) in overrides {
        raw.override_value(key, value);
    }
    finalize_config(raw, seed_flag, env_seed)
}

fn finalize_config(
    mut raw: RawConfig,
    seed_flag: Option<u64>,
    env_seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let model = match raw.take("model") {
        Some((_, value)) => value,
        None => {
            return Err(Error::Parse {
                line: 0,
                key: "model".into(),
                message: "missing required key".into(),
            })
        }
    };

    let mut params = BTreeMap::new();
    for key in ["a", "b", "c"] {
        if let Some((line, value)) = raw.take(key) {
            params.insert(key.to_string(), parse_as::<f64>(key, line, &value, "number")?);
        }
    }

    let kind = match raw.take("kind") {
        Some((line, value)) => match value.as_str() {
            "solve" => ExperimentKind::Solve,
            "rates" => ExperimentKind::Rates,
            "coupling" => ExperimentKind::Coupling,
            "moments" => ExperimentKind::Moments,
            "validate" => ExperimentKind::Validate,
            other => {
                return Err(Error::Parse {
                    line,
                    key: "kind".into(),
                    message: format!(
                        "`{other}` is not one of solve, rates, coupling, moments, validate"
                    ),
                })
            }
        },
        None => ExperimentKind::Solve,
    };

    macro_rules! scalar {
        ($key:literal, $ty:ty, $default:expr, $what:literal) => {
            match raw.take($key) {
                Some((line, value)) => parse_as::<$ty>($key, line, &value, $what)?,
                None => $default,
            }
        };
    }

    let horizon = scalar!("T", f64, 1.0, "number");
    let steps = scalar!("K", usize, 50, "integer");
    let noise_dim = scalar!("d", usize, 1, "integer");
    let state_dim = scalar!("m", usize, 1, "integer");
    let n_values = match raw.take("n") {
        Some((line, value)) => parse_list("n", line, &value)?,
        None => vec![256],
    };
    let scenarios = scalar!("M", usize, 8, "integer");
    let reference_particles = scalar!("n_ref", usize, 4096, "integer");
    let replicas = scalar!("R", usize, 4, "integer");
    let moment_order = scalar!("p", f64, 8.0, "number");
    let basis_degree = scalar!("q", u32, 2, "integer");
    let inner_iterations = scalar!("J", usize, 2, "integer");
    let ridge_factor = scalar!("ridge", f64, 1e-8, "number");
    let refinement_passes = scalar!("passes", usize, 3, "integer");
    let smoothing_degree = match raw.take("smoothing") {
        Some((line, value)) => {
            if value == "none" {
                None
            } else {
                Some(parse_as::<u32>("smoothing", line, &value, "integer or `none`")?)
            }
        }
        None => Some(2),
    };
    let measure_timing = match raw.take("timing") {
        Some((line, value)) => match value.as_str() {
            "fixed-point" => MeasureTiming::FixedPoint,
            "explicit" => MeasureTiming::Explicit,
            other => {
                return Err(Error::Parse {
                    line,
                    key: "timing".into(),
                    message: format!("`{other}` is not one of fixed-point, explicit"),
                })
            }
        },
        None => MeasureTiming::FixedPoint,
    };
    let alpha = match raw.take("alpha") {
        Some((line, value)) => Some(parse_as::<f64>("alpha", line, &value, "number")?),
        None => None,
    };
    let tol = scalar!("tol", f64, 1e-4, "number");
    let max_iter = scalar!("max_iter", usize, 20, "integer");
    let file_seed = match raw.take("seed") {
        Some((line, value)) => Some(parse_as::<u64>("seed", line, &value, "integer")?),
        None => None,
    };
    let out_dir = match raw.take("out") {
        Some((_, value)) => value,
        None => "reports".to_string(),
    };
    let dump_bundle = scalar!("dump_bundle", bool, false, "boolean");
    let reruns = scalar!("reruns", usize, 3, "integer");

    if let Some((key, (line, _))) = raw.entries.iter().next() {
        return Err(Error::Parse {
            line: *line,
            key: key.clone(),
            message: "unknown key".into(),
        });
    }

    // Flag beats file beats environment.
    let seed = seed_flag.or(file_seed).or(env_seed).unwrap_or(0);

    let config = ExperimentConfig {
        kind,
        model,
        params,
        horizon,
        steps,
        noise_dim,
        state_dim,
        n_values,
        scenarios,
        reference_particles,
        replicas,
        moment_order,
        basis_degree,
        inner_iterations,
        ridge_factor,
        smoothing_degree,
        refinement_passes,
        measure_timing,
        alpha,
        tol,
        max_iter,
        seed,
        out_dir,
        dump_bundle,
        reruns,
    };
    validate_config(&config)?;
    Ok(config)
}

fn validate_config(config: &ExperimentConfig) -> Result<()> {
    let bad = |key: &str, message: String| Error::Parse {
        line: 0,
        key: key.into(),
        message,
    };
    if !(config.horizon > 0.0 && config.horizon.is_finite()) {
        return Err(bad("T", "horizon must be positive".into()));
    }
    if config.steps == 0 {
        return Err(bad("K", "need at least one step".into()));
    }
    if config.noise_dim == 0 || config.state_dim == 0 {
        return Err(bad("d", "dimensions must be >= 1".into()));
    }
    if config.n_values.is_empty() {
        return Err(bad("n", "need at least one particle count".into()));
    }
    if config.n_values.iter().any(|n| *n == 0) {
        return Err(bad("n", "particle counts must be >= 1".into()));
    }
    if config.scenarios == 0 {
        return Err(bad("M", "need at least one scenario".into()));
    }
    if !(config.moment_order >= 2.0) {
        return Err(bad("p", "moment order must be >= 2".into()));
    }
    if !(config.tol > 0.0) {
        return Err(bad("tol", "tolerance must be positive".into()));
    }
    if config.max_iter == 0 {
        return Err(bad("max_iter", "need at least one iteration".into()));
    }
    if config.reruns == 0 {
        return Err(bad("reruns", "need at least one rerun".into()));
    }
    config.scheme().validate()?;
    Ok(())
}
