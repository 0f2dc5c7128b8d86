//! The interacting particle system: each particle's driver reads the live
//! empirical measure of its scenario.

use crate::backward::{backward_solve, BackwardSolution, MeasureSource, SchemeConfig};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::model::ModelSpec;
use crate::paths::PathBundle;

/// Solve the n-particle system by the backward regression scheme. All
/// particles of one scenario interact through the per-scenario empirical
/// measure of the current iterate.
pub fn solve_particle_system(
    spec: &ModelSpec,
    bundle: &PathBundle,
    scheme: &SchemeConfig,
) -> Result<BackwardSolution> {
    backward_solve(spec, bundle, scheme, MeasureSource::LiveEmpirical)
}

/// The empirical measure of one scenario's particles at every grid node.
pub fn empirical_flow(
    solution: &BackwardSolution,
    scenario: usize,
) -> Result<Vec<EmpiricalMeasure>> {
    if scenario >= solution.num_scenarios() {
        return Err(Error::invalid(format!(
            "scenario index {scenario} out of range (have {})",
            solution.num_scenarios()
        )));
    }
    Ok((0..=solution.grid().num_steps())
        .map(|k| solution.node_measure(scenario, k))
        .collect())
}
