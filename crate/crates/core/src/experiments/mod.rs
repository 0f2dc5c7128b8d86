//! Experiment harness: convergence-rate measurement for the particle
//! empirical measures, coupling-error ratios between the particle and
//! coupled systems, pathwise domination checks, and moment/increment
//! scaling diagnostics.

pub mod coupling;
pub mod moments;
pub mod rates;

use serde::Serialize;

use crate::backward::{MeasureFlow, SchemeConfig};
use crate::error::{Error, Result};
use crate::limit::{default_alpha, solve_limit_picard};
use crate::measures::{standard_quantile_table, EmpiricalMeasure};
use crate::model::ModelSpec;
use crate::paths::{PathBundle, TimeGrid};

/// Shared experiment geometry: grid, sample sizes, and solver knobs.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub horizon: f64,
    pub steps: usize,
    pub scenarios: usize,
    /// Size of the reference cloud standing in for the limit law when no
    /// closed form exists.
    pub reference_particles: usize,
    /// Idiosyncratic replicas per scenario, separating the two expectation
    /// layers of the ordering statistics.
    pub replicas: usize,
    /// Moment order `p` entering the theoretical exponents.
    pub moment_order: f64,
    pub seed: u64,
    pub scheme: SchemeConfig,
    /// Exponential weight of the fixed-point distance; defaults to
    /// `1 + 32 C_f^2` when absent.
    pub alpha: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl ExperimentSetup {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios < 2 {
            return Err(Error::invalid("need at least 2 scenarios"));
        }
        if self.replicas < 1 {
            return Err(Error::invalid("need at least 1 idiosyncratic replica"));
        }
        if self.reference_particles < 2 {
            return Err(Error::invalid("reference cloud needs at least 2 atoms"));
        }
        self.scheme.validate()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn alpha_for(&self, spec: &ModelSpec) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(spec.lipschitz()))
    }
}

/// How the limit law was represented in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    /// Quantile discretization of the model's closed-form conditional law.
    ClosedForm,
    /// Empirical cloud produced by the fixed-point solve of the limit
    /// equation.
    LimitCloud,
}

impl std::fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReferenceKind::ClosedForm => write!(f, "closed-form"),
            ReferenceKind::LimitCloud => write!(f, "limit-cloud"),
        }
    }
}

/// The reference measure flow for a model: the closed-form conditional law
/// discretized on `reference_particles` quantile atoms per node when
/// available, otherwise the converged limit-equation cloud.
pub(crate) fn reference_flow(
    spec: &ModelSpec,
    setup: &ExperimentSetup,
) -> Result<(MeasureFlow, ReferenceKind)> {
    let grid = setup.grid()?;
    if spec.state_dim() == 1 {
        if let Some(form) = spec.closed_form() {
            if let Some(cond_law) = form.cond_law.as_ref() {
                let table = standard_quantile_table(setup.reference_particles);
                // One scenarios-only bundle supplies the common path values.
                let bundle = PathBundle::sample(&grid, 1, setup.scenarios, spec.noise_dim(), setup.seed)?;
                let mut per_scenario = Vec::with_capacity(setup.scenarios);
                for sc in 0..setup.scenarios {
                    let common = bundle.cumulative_path(crate::paths::PathKind::Common, sc, 0)?;
                    let d = spec.noise_dim();
                    let mut nodes = Vec::with_capacity(setup.steps + 1);
                    for k in 0..=setup.steps {
                        let law = cond_law(grid.node(k), setup.horizon, &common[k * d..(k + 1) * d]);
                        let sd = law.variance.sqrt();
                        let points: Vec<f64> =
                            table.iter().map(|q| law.mean + sd * q).collect();
                        nodes.push(EmpiricalMeasure::new(points, 1)?);
                    }
                    per_scenario.push(nodes);
                }
                return Ok((
                    MeasureFlow::from_parts(grid, per_scenario),
                    ReferenceKind::ClosedForm,
                ));
            }
        }
    }
    let bundle = PathBundle::sample(
        &grid,
        setup.reference_particles,
        setup.scenarios,
        spec.noise_dim(),
        setup.seed,
    )?;
    let (_, flow, _) = solve_limit_picard(
        spec,
        &bundle,
        setup.alpha_for(spec),
        setup.tol,
        setup.max_iter,
        &setup.scheme,
    )?;
    Ok((flow, ReferenceKind::LimitCloud))
}

/// Squared distance between an empirical node measure and a reference node
/// measure of (possibly) different support size, exact in one dimension.
pub(crate) fn w2_squared_to_reference(
    mu: &EmpiricalMeasure,
    reference: &EmpiricalMeasure,
) -> Result<f64> {
    if mu.dim() != 1 || reference.dim() != 1 {
        return Err(Error::invalid(
            "reference distances are implemented for scalar states only",
        ));
    }
    let w = crate::measures::wasserstein_p_1d_quantile(mu, reference, 2.0)?;
    Ok(w * w)
}
