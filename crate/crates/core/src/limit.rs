//! Limit equation and coupled system.
//!
//! The limit equation is solved as a fixed point over measure flows: freeze
//! a flow, solve the now-decoupled backward equation per particle with the
//! driver reading the frozen flow, take the empirical flow of the new
//! solution, repeat. Successive flows are compared in an exponentially
//! weighted distance
//!
//! `D_l = max_k exp(alpha t_k) * mean_scenarios W_2^2(mu_k^(l), mu_k^(l-1))`.
//!
//! The coupled system reuses the same decoupled solve on the particle
//! bundle, so particle and coupled solutions share every Brownian increment
//! and every terminal value.

use serde::Serialize;

use crate::backward::{
    backward_solve, BackwardSolution, MeasureFlow, MeasureSource, SchemeConfig,
};
use crate::error::{Error, Result};
use crate::measures::wasserstein_2;
use crate::model::ModelSpec;
use crate::paths::PathBundle;

/// Weighted distances of the outer iteration, one entry per completed
/// iteration.
#[derive(Debug, Clone, Serialize)]
pub struct PicardTrace {
    pub distances: Vec<f64>,
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// The default exponential weight `alpha = 1 + 32 C_f^2`, the concrete
/// choice satisfying both strict inequalities behind the contraction
/// argument (epsilon = 1 / (32 C_f^2)).
pub fn default_alpha(lipschitz: f64) -> f64 {
    1.0 + 32.0 * lipschitz * lipschitz
}

/// Weighted flow distance between consecutive flows.
fn flow_distance(alpha: f64, current: &MeasureFlow, previous: &MeasureFlow) -> Result<f64> {
    let steps = current.grid().num_steps();
    let scenarios = current.num_scenarios();
    let mut worst = 0.0f64;
    for k in 0..=steps {
        let mut mean = 0.0;
        for sc in 0..scenarios {
            let d = wasserstein_2(current.measure(sc, k), previous.measure(sc, k))?;
            mean += d.value * d.value;
        }
        mean /= scenarios as f64;
        let weighted = (alpha * current.grid().node(k)).exp() * mean;
        worst = worst.max(weighted);
    }
    Ok(worst)
}

/// Solve the limit equation by the outer fixed-point iteration over measure
/// flows. The initial flow comes from the solve with the measure frozen at
/// the Dirac mass at the origin.
pub fn solve_limit_picard(
    spec: &ModelSpec,
    bundle_ref: &PathBundle,
    alpha: f64,
    tol: f64,
    max_iter: usize,
    scheme: &SchemeConfig,
) -> Result<(BackwardSolution, MeasureFlow, PicardTrace)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if max_iter == 0 {
        return Err(Error::invalid("need at least one outer iteration"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid("alpha must be nonnegative"));
    }

    let initial = backward_solve(spec, bundle_ref, scheme, MeasureSource::DiracOrigin)?;
    let mut flow = MeasureFlow::from_solution(&initial);
    let mut distances = Vec::new();

    for _ in 0..max_iter {
        let solution = backward_solve(spec, bundle_ref, scheme, MeasureSource::Frozen(&flow))?;
        let new_flow = MeasureFlow::from_solution(&solution);
        let distance = flow_distance(alpha, &new_flow, &flow)?;
        distances.push(distance);
        flow = new_flow;
        if distance <= tol {
            let trace = PicardTrace {
                iterations: distances.len(),
                distances,
                alpha,
                converged: true,
            };
            return Ok((solution, flow, trace));
        }
    }

    let last = *distances.last().expect("max_iter >= 1");
    Err(Error::NonConvergence {
        iterations: distances.len(),
        last_distance: last,
        tol,
        distances,
    })
}

/// Solve the coupled system: per-particle decoupled backward equations on
/// the particle bundle, with the driver reading the frozen limit flow. The
/// bundle must be the same object used for the particle-system solve when
/// coupling errors are measured.
pub fn solve_coupled_system(
    spec: &ModelSpec,
    bundle: &PathBundle,
    flow: &MeasureFlow,
    scheme: &SchemeConfig,
) -> Result<BackwardSolution> {
    backward_solve(spec, bundle, scheme, MeasureSource::Frozen(flow))
}

/// Observed contraction behaviour of an outer iteration trace.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    /// Successive ratios `D_{l+1} / D_l` over the recorded iterations.
    pub ratios: Vec<f64>,
    pub alpha: f64,
    /// The weight `1 + 32 C_f^2` demanded by the contraction argument, or
    /// `None` when `C_f = 0` imposes no constraint.
    pub alpha_required: Option<f64>,
    pub alpha_satisfied: Option<bool>,
    /// True when `C_f = 0` makes the weight requirement vacuous.
    pub degenerate: bool,
    /// True when the iteration converged without producing two comparable
    /// distances.
    pub converged_immediately: bool,
}

/// Report the empirical contraction ratios of a trace and whether the used
/// weight satisfies `alpha >= 1 + 1/epsilon` for `epsilon = 1/(32 C_f^2)`.
pub fn contraction_diagnostics(trace: &PicardTrace, lipschitz: f64) -> ContractionReport {
    let mut ratios = Vec::new();
    for pair in trace.distances.windows(2) {
        if pair[0] > 0.0 {
            ratios.push(pair[1] / pair[0]);
        }
    }
    let degenerate = lipschitz == 0.0;
    let alpha_required = if degenerate {
        None
    } else {
        Some(default_alpha(lipschitz))
    };
    let alpha_satisfied = alpha_required.map(|req| trace.alpha >= req);
    let converged_immediately =
        trace.distances.len() < 2 || trace.distances.first() == Some(&0.0);
    ContractionReport {
        ratios,
        alpha: trace.alpha,
        alpha_required,
        alpha_satisfied,
        degenerate,
        converged_immediately,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;

    fn scheme() -> SchemeConfig {
        SchemeConfig::default()
    }

    #[test]
    fn zero_model_converges_in_one_iteration() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let bundle = PathBundle::sample(&grid, 32, 2, 1, 4).unwrap();
        let spec = ModelSpec::zero(1.0, 1);
        let (sol, _, trace) =
            solve_limit_picard(&spec, &bundle, default_alpha(0.0), 1e-4, 5, &scheme()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations, 1);
        assert_eq!(trace.distances[0], 0.0);
        assert!((sol.y(0, 0, 0)[0] - 1.0).abs() < 1e-12);

        let report = contraction_diagnostics(&trace, 0.0);
        assert!(report.converged_immediately);
        assert!(report.degenerate);
        assert!(report.alpha_required.is_none());
    }

    #[test]
    fn martingale_limit_matches_closed_form() {
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let bundle = PathBundle::sample(&grid, 256, 16, 1, 21).unwrap();
        let spec = ModelSpec::martingale(1);
        let (sol, _, trace) =
            solve_limit_picard(&spec, &bundle, default_alpha(0.0), 1e-4, 5, &scheme()).unwrap();
        assert!(trace.converged);
        let reference = crate::model::closed_form_reference(&spec, &bundle).unwrap();
        let mut worst = 0.0f64;
        for k in 0..=25 {
            let mut acc = 0.0;
            for sc in 0..16 {
                for i in 0..256 {
                    acc += (sol.y(sc, i, k)[0] - reference.y(sc, i, k)[0]).abs();
                }
            }
            worst = worst.max(acc / (16.0 * 256.0));
        }
        assert!(worst < 0.1, "sup-node mean error {worst}");
    }

    #[test]
    fn linear_mean_contracts_geometrically() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let bundle = PathBundle::sample(&grid, 256, 4, 1, 19).unwrap();
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let alpha = default_alpha(spec.lipschitz());
        let (_, _, trace) =
            solve_limit_picard(&spec, &bundle, alpha, 1e-4, 20, &scheme()).unwrap();
        assert!(trace.converged);
        let report = contraction_diagnostics(&trace, spec.lipschitz());
        assert_eq!(report.alpha_required, Some(9.0));
        assert_eq!(report.alpha_satisfied, Some(true));
        for (idx, r) in report.ratios.iter().enumerate() {
            assert!(*r < 0.9, "ratio {idx} = {r} not contracting");
        }
    }

    #[test]
    fn rerunning_from_converged_flow_stays_within_tolerance() {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let bundle = PathBundle::sample(&grid, 128, 2, 1, 6).unwrap();
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let tol = 1e-4;
        let (_, flow, _) = solve_limit_picard(
            &spec,
            &bundle,
            default_alpha(spec.lipschitz()),
            tol,
            20,
            &scheme(),
        )
        .unwrap();
        // One more outer iteration from the converged flow.
        let again = solve_coupled_system(&spec, &bundle, &flow, &scheme()).unwrap();
        let new_flow = MeasureFlow::from_solution(&again);
        let d = flow_distance(default_alpha(spec.lipschitz()), &new_flow, &flow).unwrap();
        assert!(d <= tol, "fixed point drifted by {d}");
    }

    #[test]
    fn non_convergence_carries_trace() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bundle = PathBundle::sample(&grid, 64, 2, 1, 7).unwrap();
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        // One iteration with an absurdly small tolerance cannot converge.
        let err = solve_limit_picard(&spec, &bundle, 9.0, 1e-300, 1, &scheme()).unwrap_err();
        match err {
            Error::NonConvergence {
                iterations,
                distances,
                ..
            } => {
                assert_eq!(iterations, 1);
                assert_eq!(distances.len(), 1);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn coupled_solve_rejects_grid_mismatch() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bundle = PathBundle::sample(&grid, 32, 2, 1, 7).unwrap();
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let (_, flow, _) = solve_limit_picard(
            &spec,
            &bundle,
            default_alpha(spec.lipschitz()),
            1e-3,
            20,
            &scheme(),
        )
        .unwrap();
        let other_grid = TimeGrid::new(1.0, 20).unwrap();
        let other = PathBundle::sample(&other_grid, 32, 2, 1, 7).unwrap();
        assert!(solve_coupled_system(&spec, &other, &flow, &scheme()).is_err());
    }

    #[test]
    fn zero_model_coupled_solution_is_bit_identical_to_particles() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bundle = PathBundle::sample(&grid, 24, 3, 1, 15).unwrap();
        let spec = ModelSpec::zero(2.0, 1);
        let particle =
            crate::particle::solve_particle_system(&spec, &bundle, &scheme()).unwrap();
        let (_, flow, _) =
            solve_limit_picard(&spec, &bundle, 1.0, 1e-6, 3, &scheme()).unwrap();
        let coupled = solve_coupled_system(&spec, &bundle, &flow, &scheme()).unwrap();
        assert_eq!(particle.raw_y(), coupled.raw_y());
        assert_eq!(particle.raw_z(), coupled.raw_z());
        assert_eq!(particle.raw_z0(), coupled.raw_z0());
    }

    #[test]
    fn coupled_particles_are_conditionally_uncorrelated() {
        // Within one scenario the coupled particles are exchangeable and
        // conditionally independent: the lag-1 autocorrelation of (Y^i_0)_i
        // stays within +-4/sqrt(n).
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n = 1024;
        let bundle = PathBundle::sample(&grid, n, 2, 1, 33).unwrap();
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let (_, flow, _) = solve_limit_picard(
            &spec,
            &bundle,
            default_alpha(spec.lipschitz()),
            1e-4,
            20,
            &scheme(),
        )
        .unwrap();
        let coupled = solve_coupled_system(&spec, &bundle, &flow, &scheme()).unwrap();
        // Checked at an interior node: at t = 0 every particle shares the
        // same Brownian state, so the regression values coincide and the
        // autocorrelation is degenerate.
        for sc in 0..2 {
            let values: Vec<f64> = (0..n).map(|i| coupled.y(sc, i, 5)[0]).collect();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let mut cov = 0.0;
            for i in 0..n - 1 {
                cov += (values[i] - mean) * (values[i + 1] - mean);
            }
            cov /= (n - 1) as f64;
            let corr = cov / var;
            assert!(
                corr.abs() < 4.0 / (n as f64).sqrt(),
                "scenario {sc}: lag-1 autocorrelation {corr}"
            );
        }
    }
}
