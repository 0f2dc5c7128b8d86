//! Shared backward-Euler regression engine.
//!
//! One recursion serves all three systems solved by this crate; they differ
//! only in where the driver's measure argument comes from:
//!
//! * the live per-scenario empirical measure of the current particles
//!   (interacting particle system),
//! * a frozen measure flow (decoupled solves inside the outer fixed-point
//!   iteration, and the coupled system),
//! * the Dirac mass at the origin (initialization of the fixed point).
//!
//! Conditional expectations are estimated by pooled least squares over all
//! `(scenario, particle)` samples on polynomial features of the current
//! Brownian states `(W^i_t, W^0_t)`.
//!
//! # Variance control
//!
//! Only `num_scenarios` independent common increments exist per time step,
//! so the common-direction parts of the regressions carry `O(1/sqrt(M))`
//! noise that would otherwise accumulate backward through the recursion.
//! Two standard refinements keep this under control without changing any
//! estimated quantity:
//!
//! * gradient targets are centered by the fitted conditional mean, and the
//!   conditional-mean target has the fitted martingale part
//!   `Z dW + Z^0 dW^0` subtracted (increments are mean zero given the
//!   features, so both subtractions are exact control variates);
//! * the per-step gradient regression coefficients are smoothed across
//!   steps by a low-degree polynomial in time, then the recursion is re-run
//!   with the smoothed gradients. The coefficient paths of a Lipschitz
//!   driver vary smoothly in time, so this pools the common-noise
//!   information of all steps where a single step has almost none.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::model::ModelSpec;
use crate::paths::{PathBundle, PathKind, TimeGrid};
use crate::regression::{regress_conditional, PolyBasis};

/// When the driver reads the empirical measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureTiming {
    /// Measure taken from the current inner iterate at step `k` and updated
    /// every inner sweep (default).
    FixedPoint,
    /// Measure taken from the already-known values at step `k + 1` and held
    /// fixed through the inner sweeps.
    Explicit,
}

/// Discretization parameters of the backward scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Total degree of the polynomial regression basis in `(W^i_t, W^0_t)`.
    pub basis_degree: u32,
    /// Number of inner fixed-point sweeps per time step.
    pub inner_iterations: usize,
    /// Ridge strength relative to the mean squared feature norm.
    pub ridge_factor: f64,
    pub measure_timing: MeasureTiming,
    /// Degree of the time polynomial used to smooth gradient-coefficient
    /// paths across steps; `None` disables smoothing and the refinement
    /// passes.
    pub smoothing_degree: Option<u32>,
    /// Number of backward passes; passes after the first re-run the
    /// recursion with smoothed gradients.
    pub refinement_passes: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            basis_degree: 2,
            inner_iterations: 2,
            ridge_factor: 1e-8,
            measure_timing: MeasureTiming::FixedPoint,
            smoothing_degree: Some(2),
            refinement_passes: 3,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.basis_degree < 1 {
            return Err(Error::invalid("basis degree must be >= 1"));
        }
        if self.inner_iterations < 1 {
            return Err(Error::invalid("inner iteration count must be >= 1"));
        }
        if !(self.ridge_factor >= 0.0) {
            return Err(Error::invalid("ridge factor must be nonnegative"));
        }
        if self.refinement_passes < 1 {
            return Err(Error::invalid("need at least one backward pass"));
        }
        Ok(())
    }
}

/// Arrays `Y`, `Z`, `Z^0` indexed by (scenario, particle, step) produced by
/// any solver. `Z` holds the diagonal blocks only: the component of each
/// particle's martingale representation along its own Brownian motion.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    grid: TimeGrid,
    state_dim: usize,
    noise_dim: usize,
    num_particles: usize,
    num_scenarios: usize,
    bundle_seed: u64,
    scheme: SchemeConfig,
    /// `[scenario][particle][node][state]`, nodes `0..=K`.
    y: Vec<f64>,
    /// `[scenario][particle][step][state * noise]`, steps `0..K`.
    z: Vec<f64>,
    z0: Vec<f64>,
    warnings: Vec<String>,
}

impl BackwardSolution {
    pub(crate) fn zeroed(
        grid: TimeGrid,
        state_dim: usize,
        noise_dim: usize,
        num_particles: usize,
        num_scenarios: usize,
        bundle_seed: u64,
    ) -> Self {
        let nodes = grid.num_steps() + 1;
        let steps = grid.num_steps();
        BackwardSolution {
            y: vec![0.0; num_scenarios * num_particles * nodes * state_dim],
            z: vec![0.0; num_scenarios * num_particles * steps * state_dim * noise_dim],
            z0: vec![0.0; num_scenarios * num_particles * steps * state_dim * noise_dim],
            grid,
            state_dim,
            noise_dim,
            num_particles,
            num_scenarios,
            bundle_seed,
            scheme: SchemeConfig::default(),
            warnings: Vec::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn num_particles(&self) -> usize {
        self.num_particles
    }

    pub fn num_scenarios(&self) -> usize {
        self.num_scenarios
    }

    /// Seed of the bundle this solution was computed on; used to detect
    /// accidental mixing of randomness between solves.
    pub fn bundle_seed(&self) -> u64 {
        self.bundle_seed
    }

    pub fn scheme(&self) -> &SchemeConfig {
        &self.scheme
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn y_index(&self, sc: usize, i: usize, k: usize) -> usize {
        (((sc * self.num_particles) + i) * (self.grid.num_steps() + 1) + k) * self.state_dim
    }

    fn grad_index(&self, sc: usize, i: usize, k: usize) -> usize {
        (((sc * self.num_particles) + i) * self.grid.num_steps() + k)
            * self.state_dim
            * self.noise_dim
    }

    pub fn y(&self, sc: usize, i: usize, k: usize) -> &[f64] {
        let base = self.y_index(sc, i, k);
        &self.y[base..base + self.state_dim]
    }

    pub(crate) fn y_mut(&mut self, sc: usize, i: usize, k: usize) -> &mut [f64] {
        let base = self.y_index(sc, i, k);
        let m = self.state_dim;
        &mut self.y[base..base + m]
    }

    pub fn z(&self, sc: usize, i: usize, k: usize) -> &[f64] {
        let base = self.grad_index(sc, i, k);
        &self.z[base..base + self.state_dim * self.noise_dim]
    }

    pub(crate) fn z_mut(&mut self, sc: usize, i: usize, k: usize) -> &mut [f64] {
        let base = self.grad_index(sc, i, k);
        let len = self.state_dim * self.noise_dim;
        &mut self.z[base..base + len]
    }

    pub fn z0(&self, sc: usize, i: usize, k: usize) -> &[f64] {
        let base = self.grad_index(sc, i, k);
        &self.z0[base..base + self.state_dim * self.noise_dim]
    }

    pub(crate) fn z0_mut(&mut self, sc: usize, i: usize, k: usize) -> &mut [f64] {
        let base = self.grad_index(sc, i, k);
        let len = self.state_dim * self.noise_dim;
        &mut self.z0[base..base + len]
    }

    #[cfg(test)]
    pub(crate) fn raw_y(&self) -> &[f64] {
        &self.y
    }

    #[cfg(test)]
    pub(crate) fn raw_z(&self) -> &[f64] {
        &self.z
    }

    #[cfg(test)]
    pub(crate) fn raw_z0(&self) -> &[f64] {
        &self.z0
    }

    /// Empirical measure of the particle values of one scenario at one node.
    pub fn node_measure(&self, sc: usize, k: usize) -> EmpiricalMeasure {
        let mut points = Vec::with_capacity(self.num_particles * self.state_dim);
        for i in 0..self.num_particles {
            points.extend_from_slice(self.y(sc, i, k));
        }
        EmpiricalMeasure::new(points, self.state_dim).expect("solution values are finite")
    }
}

/// A measure per (scenario, node): the discrete stand-in for the flow of
/// conditional laws.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    grid: TimeGrid,
    /// `[scenario][node]`.
    measures: Vec<Vec<EmpiricalMeasure>>,
}

impl MeasureFlow {
    /// Assemble a flow from explicit per-(scenario, node) measures.
    pub fn from_parts(grid: TimeGrid, measures: Vec<Vec<EmpiricalMeasure>>) -> Self {
        assert!(!measures.is_empty());
        for per_scenario in &measures {
            assert_eq!(per_scenario.len(), grid.num_steps() + 1);
        }
        MeasureFlow { grid, measures }
    }

    pub fn from_solution(solution: &BackwardSolution) -> Self {
        let measures = (0..solution.num_scenarios())
            .map(|sc| {
                (0..=solution.grid().num_steps())
                    .map(|k| solution.node_measure(sc, k))
                    .collect()
            })
            .collect();
        MeasureFlow {
            grid: solution.grid().clone(),
            measures,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_scenarios(&self) -> usize {
        self.measures.len()
    }

    pub fn atoms(&self) -> usize {
        self.measures[0][0].len()
    }

    pub fn measure(&self, sc: usize, k: usize) -> &EmpiricalMeasure {
        &self.measures[sc][k]
    }
}

/// Where the driver's measure argument comes from during a solve.
pub(crate) enum MeasureSource<'a> {
    LiveEmpirical,
    Frozen(&'a MeasureFlow),
    DiracOrigin,
}

/// Gradient values per (step, sample, component), used to carry one pass's
/// estimates into the next. Value-space storage avoids evaluating a step's
/// regression coefficients outside the feature geometry they were fitted
/// on.
struct GradientValues {
    /// `[(step * samples + row) * width + component]` for `Z`.
    z: Vec<f64>,
    /// Same layout for `Z^0`.
    z0: Vec<f64>,
}

/// Fixed data shared by all backward passes.
struct SolveContext<'a> {
    spec: &'a ModelSpec,
    bundle: &'a PathBundle,
    scheme: &'a SchemeConfig,
    basis: PolyBasis,
    /// `[scenario][particle][node][coord]`.
    idio_values: Vec<f64>,
    /// `[scenario][node][coord]`.
    common_values: Vec<f64>,
    /// Terminal values `[scenario][particle][state]`.
    terminal: Vec<f64>,
}

pub(crate) fn backward_solve(
    spec: &ModelSpec,
    bundle: &PathBundle,
    scheme: &SchemeConfig,
    source: MeasureSource<'_>,
) -> Result<BackwardSolution> {
    scheme.validate()?;
    let d = spec.noise_dim();
    let m = spec.state_dim();
    if bundle.noise_dim() != d {
        return Err(Error::invalid(format!(
            "bundle noise dimension {} does not match model ({d})",
            bundle.noise_dim()
        )));
    }
    if let MeasureSource::Frozen(flow) = &source {
        if flow.grid() != bundle.grid() {
            return Err(Error::invalid(
                "measure flow and bundle live on different time grids",
            ));
        }
        if flow.num_scenarios() != bundle.num_scenarios() {
            return Err(Error::invalid(format!(
                "measure flow has {} scenarios, bundle has {}",
                flow.num_scenarios(),
                bundle.num_scenarios()
            )));
        }
        if flow.measure(0, 0).dim() != m {
            return Err(Error::invalid(
                "measure flow dimension does not match the model state dimension",
            ));
        }
    }

    let steps = bundle.grid().num_steps();
    let scenarios = bundle.num_scenarios();
    let particles = bundle.num_particles();
    let samples = scenarios * particles;

    let basis = PolyBasis::total_degree(2 * d, scheme.basis_degree);
    if samples < basis.len() {
        return Err(Error::invalid(format!(
            "pooled regression needs at least {} samples (scenarios x particles), got {samples}",
            basis.len()
        )));
    }

    // Path values at all nodes: the regression features.
    let mut idio_values = vec![0.0; scenarios * particles * (steps + 1) * d];
    let mut common_values = vec![0.0; scenarios * (steps + 1) * d];
    for sc in 0..scenarios {
        let path = bundle.cumulative_path(PathKind::Common, sc, 0)?;
        common_values[sc * (steps + 1) * d..(sc + 1) * (steps + 1) * d].copy_from_slice(&path);
        for i in 0..particles {
            let path = bundle.cumulative_path(PathKind::Idiosyncratic, sc, i)?;
            let base = (sc * particles + i) * (steps + 1) * d;
            idio_values[base..base + (steps + 1) * d].copy_from_slice(&path);
        }
    }

    // Terminal condition from the endpoint path values.
    let mut terminal = vec![0.0; samples * m];
    {
        let mut xi = vec![0.0; m];
        for sc in 0..scenarios {
            let common_end = &common_values[sc * (steps + 1) * d + steps * d..][..d];
            for i in 0..particles {
                let row = sc * particles + i;
                let idio_end =
                    &idio_values[(sc * particles + i) * (steps + 1) * d + steps * d..][..d];
                spec.terminal_into(idio_end, common_end, &mut xi);
                terminal[row * m..(row + 1) * m].copy_from_slice(&xi);
            }
        }
    }

    let ctx = SolveContext {
        spec,
        bundle,
        scheme,
        basis,
        idio_values,
        common_values,
        terminal,
    };

    let passes = if scheme.smoothing_degree.is_some() {
        scheme.refinement_passes
    } else {
        1
    };
    let mut smoothed: Option<GradientValues> = None;
    let mut result = None;
    for pass in 0..passes {
        let another_pass_follows = pass + 1 < passes;
        let (solution, raw) =
            backward_pass(&ctx, &source, smoothed.as_ref(), another_pass_follows)?;
        if another_pass_follows {
            smoothed = Some(smooth_gradients(
                raw,
                bundle.grid(),
                samples,
                scheme.smoothing_degree.unwrap_or(0),
            )?);
        }
        result = Some(solution);
    }
    Ok(result.expect("at least one pass"))
}

/// One full backward recursion. When smoothed gradient values are supplied
/// they are used in place of the per-step fits. Returns the solution
/// together with the raw per-sample gradient values for the next smoothing
/// round (empty unless requested).
fn backward_pass(
    ctx: &SolveContext<'_>,
    source: &MeasureSource<'_>,
    smoothed: Option<&GradientValues>,
    pass_collects_raw: bool,
) -> Result<(BackwardSolution, GradientValues)> {
    let spec = ctx.spec;
    let bundle = ctx.bundle;
    let scheme = ctx.scheme;
    let grid = bundle.grid().clone();
    let steps = grid.num_steps();
    let dt = grid.dt();
    let d = spec.noise_dim();
    let m = spec.state_dim();
    let scenarios = bundle.num_scenarios();
    let particles = bundle.num_particles();
    let samples = scenarios * particles;
    let nf = ctx.basis.len();
    let grad_width = m * d;

    let mut solution = BackwardSolution::zeroed(
        grid.clone(),
        m,
        d,
        particles,
        scenarios,
        bundle.seed(),
    );
    solution.scheme = *scheme;
    if spec.lipschitz() * dt >= 1.0 {
        solution.warnings.push(format!(
            "C_f * dt = {} >= 1: the inner fixed-point sweep may not contract",
            spec.lipschitz() * dt
        ));
    }
    if particles == 1 {
        solution
            .warnings
            .push("single-particle empirical measure is degenerate".into());
    }

    for sc in 0..scenarios {
        for i in 0..particles {
            let row = sc * particles + i;
            solution
                .y_mut(sc, i, steps)
                .copy_from_slice(&ctx.terminal[row * m..(row + 1) * m]);
        }
    }

    let mut raw = GradientValues {
        z: if pass_collects_raw {
            vec![0.0; steps * samples * grad_width]
        } else {
            Vec::new()
        },
        z0: if pass_collects_raw {
            vec![0.0; steps * samples * grad_width]
        } else {
            Vec::new()
        },
    };

    // Scratch buffers reused across steps.
    let mut features = vec![0.0; samples * nf];
    let mut target_y = vec![0.0; samples * m];
    let mut target_grad = vec![0.0; samples * grad_width];
    let mut cond_mean = vec![0.0; samples * m];
    let mut y_state = vec![0.0; samples * m];
    let mut rank_warned = false;

    for k in (0..steps).rev() {
        let t_k = grid.node(k);

        // Feature rows from the Brownian states at t_k.
        features
            .par_chunks_mut(particles * nf)
            .enumerate()
            .for_each(|(sc, block)| {
                let mut state = vec![0.0; 2 * d];
                for i in 0..particles {
                    let idio_base = (sc * particles + i) * (steps + 1) * d + k * d;
                    let common_base = sc * (steps + 1) * d + k * d;
                    state[..d].copy_from_slice(&ctx.idio_values[idio_base..idio_base + d]);
                    state[d..]
                        .copy_from_slice(&ctx.common_values[common_base..common_base + d]);
                    ctx.basis.eval_into(&state, &mut block[i * nf..(i + 1) * nf]);
                }
            });

        for sc in 0..scenarios {
            for i in 0..particles {
                let row = sc * particles + i;
                target_y[row * m..(row + 1) * m].copy_from_slice(solution.y(sc, i, k + 1));
            }
        }

        let mean_sq_feature = features.iter().map(|x| x * x).sum::<f64>() / samples as f64;
        let lambda = scheme.ridge_factor * mean_sq_feature;

        // Gradients for this step: either evaluated from the smoothed
        // coefficient paths of the previous pass, or fitted fresh after
        // centering by a pilot conditional mean.
        match smoothed {
            Some(values) => {
                for row in 0..samples {
                    let (sc, i) = (row / particles, row % particles);
                    let base = (k * samples + row) * grad_width;
                    solution
                        .z_mut(sc, i, k)
                        .copy_from_slice(&values.z[base..base + grad_width]);
                    solution
                        .z0_mut(sc, i, k)
                        .copy_from_slice(&values.z0[base..base + grad_width]);
                }
            }
            None => {
                let fit_pilot = regress_conditional(&features, nf, &target_y, m, lambda)?;
                for row in 0..samples {
                    fit_pilot.predict_into(
                        &features[row * nf..(row + 1) * nf],
                        &mut cond_mean[row * m..(row + 1) * m],
                    );
                }
                let fits = fit_gradients(
                    &features,
                    nf,
                    &target_y,
                    &cond_mean,
                    &mut target_grad,
                    bundle,
                    k,
                    dt,
                    m,
                    d,
                    lambda,
                )?;
                let mut num_buf = vec![0.0; grad_width];
                let mut den_buf = vec![0.0; d];
                for row in 0..samples {
                    let (sc, i) = (row / particles, row % particles);
                    let feats = &features[row * nf..(row + 1) * nf];
                    fits.predict_z_into(feats, &mut num_buf, &mut den_buf, solution.z_mut(sc, i, k));
                    fits.predict_z0_into(feats, &mut num_buf, &mut den_buf, solution.z0_mut(sc, i, k));
                }
                if !rank_warned && fits.is_rank_deficient() {
                    rank_warned = true;
                    solution.warnings.push(format!(
                        "rank-deficient regression at step {k}; minimal-norm solution used"
                    ));
                }
            }
        }

        // Conditional mean with the estimated martingale part removed: the
        // subtraction is mean zero given the features, so the estimate is
        // unchanged while the per-step common-noise fluctuation no longer
        // leaks into the fit.
        for sc in 0..scenarios {
            let dw0 = bundle.common_increment(sc, k);
            for i in 0..particles {
                let row = sc * particles + i;
                let dw = bundle.idio_increment(sc, i, k);
                let z_hat = solution.z(sc, i, k);
                let z0_hat = solution.z0(sc, i, k);
                for a in 0..m {
                    let mut v = target_y[row * m + a];
                    for b in 0..d {
                        v -= z_hat[a * d + b] * dw[b] + z0_hat[a * d + b] * dw0[b];
                    }
                    target_grad[row * m + a] = v;
                }
            }
        }
        let fit_c =
            regress_conditional(&features, nf, &target_grad[..samples * m], m, lambda)?;
        for row in 0..samples {
            fit_c.predict_into(
                &features[row * nf..(row + 1) * nf],
                &mut cond_mean[row * m..(row + 1) * m],
            );
        }
        if !rank_warned && fit_c.is_rank_deficient() {
            rank_warned = true;
            solution.warnings.push(format!(
                "rank-deficient regression at step {k}; minimal-norm solution used"
            ));
        }

        // Re-fit the gradients against the refined centering and keep the
        // per-sample predictions for the next smoothing round.
        if pass_collects_raw {
            let fits = fit_gradients(
                &features,
                nf,
                &target_y,
                &cond_mean,
                &mut target_grad,
                bundle,
                k,
                dt,
                m,
                d,
                lambda,
            )?;
            let mut num_buf = vec![0.0; grad_width];
            let mut den_buf = vec![0.0; d];
            for row in 0..samples {
                let feats = &features[row * nf..(row + 1) * nf];
                let base = (k * samples + row) * grad_width;
                fits.predict_z_into(
                    feats,
                    &mut num_buf,
                    &mut den_buf,
                    &mut raw.z[base..base + grad_width],
                );
                fits.predict_z0_into(
                    feats,
                    &mut num_buf,
                    &mut den_buf,
                    &mut raw.z0[base..base + grad_width],
                );
            }
        }

        // Inner fixed-point sweeps, parallel across scenarios. Within one
        // scenario the particles are coupled through the empirical measure,
        // so they advance together sweep by sweep.
        y_state.copy_from_slice(&cond_mean);
        let dirac = EmpiricalMeasure::dirac_origin(m);
        let step_error: Vec<Option<String>> = y_state
            .par_chunks_mut(particles * m)
            .enumerate()
            .map(|(sc, y_block)| {
                let mut drv = vec![0.0; m];
                for _sweep in 0..scheme.inner_iterations {
                    let measure_storage;
                    let mu: &EmpiricalMeasure = match source {
                        MeasureSource::DiracOrigin => &dirac,
                        MeasureSource::Frozen(flow) => match scheme.measure_timing {
                            MeasureTiming::FixedPoint => flow.measure(sc, k),
                            MeasureTiming::Explicit => flow.measure(sc, k + 1),
                        },
                        MeasureSource::LiveEmpirical => {
                            let points = match scheme.measure_timing {
                                MeasureTiming::FixedPoint => y_block.to_vec(),
                                MeasureTiming::Explicit => {
                                    target_y[sc * particles * m..(sc + 1) * particles * m]
                                        .to_vec()
                                }
                            };
                            measure_storage = EmpiricalMeasure::new(points, m).ok();
                            match &measure_storage {
                                Some(mu) => mu,
                                None => {
                                    return Some(format!(
                                        "non-finite particle values in scenario {sc} at step {k}"
                                    ))
                                }
                            }
                        }
                    };
                    for i in 0..particles {
                        let row = sc * particles + i;
                        let y_i = &y_block[i * m..(i + 1) * m];
                        if spec
                            .eval_driver_into(
                                t_k,
                                y_i,
                                solution.z(sc, i, k),
                                solution.z0(sc, i, k),
                                mu,
                                &mut drv,
                            )
                            .is_err()
                        {
                            return Some(format!("driver failed in scenario {sc} at step {k}"));
                        }
                        for a in 0..m {
                            y_block[i * m + a] = cond_mean[row * m + a] + drv[a] * dt;
                        }
                    }
                }
                if y_block.iter().any(|v| !v.is_finite()) {
                    return Some(format!(
                        "non-finite solution value in scenario {sc} at step {k}"
                    ));
                }
                None
            })
            .collect();
        if let Some(msg) = step_error.into_iter().flatten().next() {
            return Err(Error::Numeric(msg));
        }

        for sc in 0..scenarios {
            for i in 0..particles {
                let row = sc * particles + i;
                solution
                    .y_mut(sc, i, k)
                    .copy_from_slice(&y_state[row * m..(row + 1) * m]);
            }
        }
    }

    Ok((solution, raw))
}

/// Both gradient families of one step, fitted from centered one-step
/// targets and self-normalized by the fitted quadratic variation.
///
/// The raw estimator `predict[(Y_{k+1} - c) dW / dt]` divides by the exact
/// increment variance `dt`; with few independent common increments per
/// step, the sampled `(dW^0)^2` fluctuates around `dt` with relative noise
/// `sqrt(2/M)`, and that fluctuation enters the fit multiplicatively.
/// Regressing `dW^2 / dt` on the same basis and dividing pointwise cancels
/// the fluctuation exactly wherever the gradient is spatially flat, and to
/// first order otherwise.
struct GradientFits {
    num_z: crate::regression::RegressionFit,
    num_z0: crate::regression::RegressionFit,
    den_idio: crate::regression::RegressionFit,
    den_common: crate::regression::RegressionFit,
    state_dim: usize,
    noise_dim: usize,
}

impl GradientFits {
    fn predict_z_into(&self, features: &[f64], num_buf: &mut [f64], den_buf: &mut [f64], out: &mut [f64]) {
        self.num_z.predict_into(features, num_buf);
        self.den_idio.predict_into(features, den_buf);
        ratio_combine(num_buf, den_buf, self.state_dim, self.noise_dim, out);
    }

    fn predict_z0_into(&self, features: &[f64], num_buf: &mut [f64], den_buf: &mut [f64], out: &mut [f64]) {
        self.num_z0.predict_into(features, num_buf);
        self.den_common.predict_into(features, den_buf);
        ratio_combine(num_buf, den_buf, self.state_dim, self.noise_dim, out);
    }

    fn is_rank_deficient(&self) -> bool {
        self.num_z.is_rank_deficient() || self.num_z0.is_rank_deficient()
    }
}

/// `out[a, b] = num[a, b] / den[b]`, falling back to the exact normalizer
/// (den = 1) when the fitted quadratic variation strays too far from its
/// mean to be trustworthy.
fn ratio_combine(num: &[f64], den: &[f64], m: usize, d: usize, out: &mut [f64]) {
    for b in 0..d {
        let den_b = if den[b] > 0.2 && den[b] < 5.0 { den[b] } else { 1.0 };
        for a in 0..m {
            out[a * d + b] = num[a * d + b] / den_b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_gradients(
    features: &[f64],
    nf: usize,
    target_y: &[f64],
    cond_mean: &[f64],
    target_grad: &mut [f64],
    bundle: &PathBundle,
    k: usize,
    dt: f64,
    m: usize,
    d: usize,
    lambda: f64,
) -> Result<GradientFits> {
    let particles = bundle.num_particles();
    let scenarios = bundle.num_scenarios();
    let samples = scenarios * particles;

    for sc in 0..scenarios {
        for i in 0..particles {
            let row = sc * particles + i;
            let dw = bundle.idio_increment(sc, i, k);
            for a in 0..m {
                let centered = target_y[row * m + a] - cond_mean[row * m + a];
                for b in 0..d {
                    target_grad[(row * m + a) * d + b] = centered * dw[b] / dt;
                }
            }
        }
    }
    let num_z = regress_conditional(features, nf, target_grad, m * d, lambda)?;

    let mut den = vec![0.0; samples * d];
    for sc in 0..scenarios {
        for i in 0..particles {
            let row = sc * particles + i;
            let dw = bundle.idio_increment(sc, i, k);
            for b in 0..d {
                den[row * d + b] = dw[b] * dw[b] / dt;
            }
        }
    }
    let den_idio = regress_conditional(features, nf, &den, d, lambda)?;

    for sc in 0..scenarios {
        let dw0 = bundle.common_increment(sc, k);
        for i in 0..particles {
            let row = sc * particles + i;
            for a in 0..m {
                let centered = target_y[row * m + a] - cond_mean[row * m + a];
                for b in 0..d {
                    target_grad[(row * m + a) * d + b] = centered * dw0[b] / dt;
                }
            }
        }
    }
    let num_z0 = regress_conditional(features, nf, target_grad, m * d, lambda)?;

    for sc in 0..scenarios {
        let dw0 = bundle.common_increment(sc, k);
        for i in 0..particles {
            let row = sc * particles + i;
            for b in 0..d {
                den[row * d + b] = dw0[b] * dw0[b] / dt;
            }
        }
    }
    let den_common = regress_conditional(features, nf, &den, d, lambda)?;

    Ok(GradientFits {
        num_z,
        num_z0,
        den_idio,
        den_common,
        state_dim: m,
        noise_dim: d,
    })
}

/// Replace every per-sample gradient path by its least-squares polynomial
/// in time of the given degree, evaluated back on the step midpoints. This
/// pools the common-noise information of all steps: a single step sees only
/// `num_scenarios` independent common increments.
fn smooth_gradients(
    raw: GradientValues,
    grid: &TimeGrid,
    samples: usize,
    degree: u32,
) -> Result<GradientValues> {
    let steps = grid.num_steps();
    let deg = (degree as usize).min(steps.saturating_sub(1));
    let cols = deg + 1;
    // Time design matrix on normalized step midpoints.
    let mut design = vec![0.0; steps * cols];
    for k in 0..steps {
        let u = (k as f64 + 0.5) / steps as f64;
        let mut p = 1.0;
        for c in 0..cols {
            design[k * cols + c] = p;
            p *= u;
        }
    }
    let width = raw.z.len() / steps.max(1) / samples.max(1) * samples;
    // One multi-target fit per family: rows are steps, targets are all
    // (sample, component) series at once.
    let smooth_family = |family: &[f64]| -> Result<Vec<f64>> {
        let fit = regress_conditional(&design, cols, family, width, 0.0)?;
        let mut out = vec![0.0; family.len()];
        for k in 0..steps {
            fit.predict_into(
                &design[k * cols..(k + 1) * cols],
                &mut out[k * width..(k + 1) * width],
            );
        }
        Ok(out)
    };
    Ok(GradientValues {
        z: smooth_family(&raw.z)?,
        z0: smooth_family(&raw.z0)?,
    })
}
