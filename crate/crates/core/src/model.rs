//! Model descriptions: driver, terminal condition, declared Lipschitz
//! constant, and (for the built-in zoo) closed-form reference solutions.
//!
//! A driver maps `(t, y, z, z0, mu)` to R^m, where `mu` is an empirical
//! measure standing in for the conditional law of the solution. Drivers
//! access `mu` only through functionals that are Lipschitz under `W_2`
//! (mean, distance to a fixed measure), which preserves the global
//! Lipschitz contract by construction.
//!
//! The zoo:
//! * `zero`         — driver 0, terminal constant `c`; the solution is the
//!   constant martingale.
//! * `martingale`   — driver 0, terminal `sum(W_T) + sum(W0_T)`.
//! * `linear-mean`  — driver `a * mean(mu)`, terminal
//!   `sum(W_T) + c + sum(W0_T)`; the conditional mean grows like
//!   `exp(a (T - t))`.
//! * `w2-interaction` — driver `b * W_2(mu, delta_0)`, same terminal shape;
//!   no closed form.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backward::BackwardSolution;
use crate::error::{Error, Result};
use crate::measures::{wasserstein_2, EmpiricalMeasure, GaussianLaw};
use crate::paths::PathBundle;

type DriverFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
type TerminalFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
type StateRefFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
type GradRefFn = Arc<dyn Fn(f64, f64, &mut [f64]) + Send + Sync>;
type CondLawFn = Arc<dyn Fn(f64, f64, &[f64]) -> GaussianLaw + Send + Sync>;

/// Closed-form reference solution, available for part of the zoo. All
/// functions receive the time `t` and the horizon `T` explicitly.
#[derive(Clone)]
pub struct ClosedFormSolution {
    /// `y_ref(t, T, idio path value, common path value)`.
    pub y: StateRefFn,
    /// `z_ref(t, T)`, an `m x d` block.
    pub z: GradRefFn,
    /// `z0_ref(t, T)`, an `m x d` block.
    pub z0: GradRefFn,
    /// Conditional law of `Y_t` given the common path (scalar models only):
    /// `cond_law(t, T, common path value)`.
    pub cond_law: Option<CondLawFn>,
}

/// A conditional mean-field BSDE instance.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    params: BTreeMap<String, f64>,
    state_dim: usize,
    noise_dim: usize,
    lipschitz: f64,
    driver: DriverFn,
    terminal: TerminalFn,
    closed_form: Option<ClosedFormSolution>,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("lipschitz", &self.lipschitz)
            .field("has_closed_form", &self.closed_form.is_some())
            .finish()
    }
}

fn sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

impl ModelSpec {
    /// Driver identically zero, terminal condition the constant `c`.
    pub fn zero(c: f64, noise_dim: usize) -> Self {
        ModelSpec {
            name: "zero".into(),
            params: BTreeMap::from([("c".into(), c)]),
            state_dim: 1,
            noise_dim,
            lipschitz: 0.0,
            driver: Arc::new(|_, _, _, _, _, out| out[0] = 0.0),
            terminal: Arc::new(move |_, _, out| out[0] = c),
            closed_form: Some(ClosedFormSolution {
                y: Arc::new(move |_, _, _, _, out| out[0] = c),
                z: Arc::new(|_, _, out| out.fill(0.0)),
                z0: Arc::new(|_, _, out| out.fill(0.0)),
                cond_law: Some(Arc::new(move |_, _, _| GaussianLaw::new(c, 0.0))),
            }),
        }
    }

    /// Driver zero, terminal `sum(W_T) + sum(W0_T)`: the solution is the sum
    /// of both Brownian motions, with unit gradients.
    pub fn martingale(noise_dim: usize) -> Self {
        let d = noise_dim as f64;
        ModelSpec {
            name: "martingale".into(),
            params: BTreeMap::new(),
            state_dim: 1,
            noise_dim,
            lipschitz: 0.0,
            driver: Arc::new(|_, _, _, _, _, out| out[0] = 0.0),
            terminal: Arc::new(|w, w0, out| out[0] = sum(w) + sum(w0)),
            closed_form: Some(ClosedFormSolution {
                y: Arc::new(|_, _, w, w0, out| out[0] = sum(w) + sum(w0)),
                z: Arc::new(|_, _, out| out.fill(1.0)),
                z0: Arc::new(|_, _, out| out.fill(1.0)),
                cond_law: Some(Arc::new(move |t, _, w0| GaussianLaw::new(sum(w0), t * d))),
            }),
        }
    }

    /// Driver `a * mean(mu)`, terminal `sum(W_T) + c + sum(W0_T)`. The
    /// conditional mean solves the backward ODE `m' = -a m`, so
    /// `Y_t = sum(W_t) + exp(a (T - t)) (c + sum(W0_t))`.
    pub fn linear_mean(a: f64, c: f64, noise_dim: usize) -> Self {
        let d = noise_dim as f64;
        ModelSpec {
            name: "linear-mean".into(),
            params: BTreeMap::from([("a".into(), a), ("c".into(), c)]),
            state_dim: 1,
            noise_dim,
            lipschitz: a.abs(),
            driver: Arc::new(move |_, _, _, _, mu: &EmpiricalMeasure, out: &mut [f64]| {
                out[0] = a * mu.mean()[0];
            }),
            terminal: Arc::new(move |w, w0, out| out[0] = sum(w) + c + sum(w0)),
            closed_form: Some(ClosedFormSolution {
                y: Arc::new(move |t, horizon, w, w0, out| {
                    out[0] = sum(w) + (a * (horizon - t)).exp() * (c + sum(w0));
                }),
                z: Arc::new(|_, _, out| out.fill(1.0)),
                z0: Arc::new(move |t, horizon, out| out.fill((a * (horizon - t)).exp())),
                cond_law: Some(Arc::new(move |t, horizon, w0| {
                    GaussianLaw::new((a * (horizon - t)).exp() * (c + sum(w0)), t * d)
                })),
            }),
        }
    }

    /// Driver `b * W_2(mu, delta_0)`, terminal `sum(W_T) + c + sum(W0_T)`.
    /// No closed form; serves as the second interaction model.
    pub fn w2_interaction(b: f64, c: f64, noise_dim: usize) -> Self {
        ModelSpec {
            name: "w2-interaction".into(),
            params: BTreeMap::from([("b".into(), b), ("c".into(), c)]),
            state_dim: 1,
            noise_dim,
            lipschitz: b.abs(),
            driver: Arc::new(move |_, _, _, _, mu: &EmpiricalMeasure, out: &mut [f64]| {
                out[0] = b * mu.mean_sq_norm().sqrt();
            }),
            terminal: Arc::new(move |w, w0, out| out[0] = sum(w) + c + sum(w0)),
            closed_form: None,
        }
    }

    /// Fully custom model, used by tests.
    pub fn custom(
        name: &str,
        state_dim: usize,
        noise_dim: usize,
        lipschitz: f64,
        driver: DriverFn,
        terminal: TerminalFn,
    ) -> Self {
        ModelSpec {
            name: name.into(),
            params: BTreeMap::new(),
            state_dim,
            noise_dim,
            lipschitz,
            driver,
            terminal,
            closed_form: None,
        }
    }

    /// Resolve a model by name plus parameter map (the config surface).
    /// Unknown names or parameters are rejected.
    pub fn from_config(
        name: &str,
        params: &BTreeMap<String, f64>,
        noise_dim: usize,
    ) -> Result<Self> {
        let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
        let allow = |allowed: &[&str]| -> Result<()> {
            for key in params.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::invalid(format!(
                        "model `{name}` does not take parameter `{key}`"
                    )));
                }
            }
            Ok(())
        };
        match name {
            "zero" => {
                allow(&["c"])?;
                Ok(ModelSpec::zero(get("c", 1.0), noise_dim))
            }
            "martingale" => {
                allow(&[])?;
                Ok(ModelSpec::martingale(noise_dim))
            }
            "linear-mean" => {
                allow(&["a", "c"])?;
                Ok(ModelSpec::linear_mean(get("a", 0.5), get("c", 1.0), noise_dim))
            }
            "w2-interaction" => {
                allow(&["b", "c"])?;
                Ok(ModelSpec::w2_interaction(get("b", 0.5), get("c", 1.0), noise_dim))
            }
            other => Err(Error::invalid(format!("unknown model `{other}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Solution dimension `m`.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Brownian dimension `d`.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Declared Lipschitz constant of the driver.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn has_closed_form(&self) -> bool {
        self.closed_form.is_some()
    }

    pub fn closed_form(&self) -> Option<&ClosedFormSolution> {
        self.closed_form.as_ref()
    }

    /// Evaluate the terminal condition on endpoint path values.
    pub fn terminal_into(&self, idio_end: &[f64], common_end: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.state_dim);
        (self.terminal)(idio_end, common_end, out);
    }

    /// Checked driver evaluation.
    pub fn eval_driver(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        z0: &[f64],
        mu: &EmpiricalMeasure,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim];
        self.eval_driver_into(t, y, z, z0, mu, &mut out)?;
        Ok(out)
    }

    /// Checked driver evaluation writing into a caller buffer.
    pub fn eval_driver_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        z0: &[f64],
        mu: &EmpiricalMeasure,
        out: &mut [f64],
    ) -> Result<()> {
        let (m, d) = (self.state_dim, self.noise_dim);
        if y.len() != m || z.len() != m * d || z0.len() != m * d || out.len() != m {
            return Err(Error::invalid(format!(
                "driver argument shapes ({}, {}, {}) do not match (m, d) = ({m}, {d})",
                y.len(),
                z.len(),
                z0.len()
            )));
        }
        if mu.dim() != m {
            return Err(Error::invalid(format!(
                "measure dimension {} does not match state dimension {m}",
                mu.dim()
            )));
        }
        (self.driver)(t, y, z, z0, mu, out);
        for (idx, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "driver `{}` produced non-finite component {idx} at t = {t}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Result of sampling difference quotients of the driver.
#[derive(Debug, Clone)]
pub struct LipschitzProbe {
    /// Largest sampled difference quotient.
    pub estimate: f64,
    /// The declared constant it is checked against.
    pub declared: f64,
    /// True when the estimate exceeds the declaration beyond rounding.
    pub violation: bool,
    /// Human-readable description of the worst pair.
    pub witness: String,
}

/// Estimate the driver's Lipschitz constant by sampling random argument
/// pairs and maximizing the difference quotient against
/// `|dy| + |dz| + |dz0| + W_2(mu, nu)`.
pub fn lipschitz_probe(spec: &ModelSpec, num_samples: usize, seed: u64) -> Result<LipschitzProbe> {
    if num_samples < 2 {
        return Err(Error::invalid("need at least 2 probe samples"));
    }
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c49_5053);
    fn gauss(rng: &mut ChaCha8Rng, scale: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                g * scale
            })
            .collect()
    }

    let mut best = 0.0f64;
    let mut witness = String::from("no admissible pair sampled");
    let cloud_atoms = 16;
    for _ in 0..num_samples {
        let t: f64 = rng.random();
        let y1 = gauss(&mut rng, 2.0, m);
        let y2 = gauss(&mut rng, 2.0, m);
        let z1 = gauss(&mut rng, 1.5, m * d);
        let z2 = gauss(&mut rng, 1.5, m * d);
        let z01 = gauss(&mut rng, 1.5, m * d);
        let z02 = gauss(&mut rng, 1.5, m * d);
        let mu = EmpiricalMeasure::new(gauss(&mut rng, 2.0, cloud_atoms * m), m)?;
        let nu = EmpiricalMeasure::new(gauss(&mut rng, 2.0, cloud_atoms * m), m)?;

        let f1 = spec.eval_driver(t, &y1, &z1, &z01, &mu)?;
        let f2 = spec.eval_driver(t, &y2, &z2, &z02, &nu)?;
        let df = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let w2 = wasserstein_2(&mu, &nu)?.value;
        let denom = norm(&y1, &y2) + norm(&z1, &z2) + norm(&z01, &z02) + w2;
        if denom < 1e-12 {
            continue;
        }
        let quotient = df / denom;
        if quotient > best {
            best = quotient;
            witness = format!(
                "t = {t:.4}, |df| = {df:.6}, denominator = {denom:.6} (W2 part {w2:.6})"
            );
        }
    }
    Ok(LipschitzProbe {
        estimate: best,
        declared: spec.lipschitz(),
        violation: best > spec.lipschitz() * (1.0 + 1e-9) + 1e-15,
        witness,
    })
}

/// Evaluate the closed-form solution on every (scenario, particle, node) of
/// a bundle.
pub fn closed_form_reference(spec: &ModelSpec, bundle: &PathBundle) -> Result<BackwardSolution> {
    let form = spec.closed_form().ok_or_else(|| {
        Error::UnsupportedModel(format!("model `{}` has no closed form", spec.name()))
    })?;
    if bundle.noise_dim() != spec.noise_dim() {
        return Err(Error::invalid(format!(
            "bundle noise dimension {} does not match model ({})",
            bundle.noise_dim(),
            spec.noise_dim()
        )));
    }
    let grid = bundle.grid().clone();
    let horizon = grid.horizon();
    let steps = grid.num_steps();
    let (m_dim, d) = (spec.state_dim(), spec.noise_dim());
    let scenarios = bundle.num_scenarios();
    let particles = bundle.num_particles();

    let mut sol = BackwardSolution::zeroed(grid, m_dim, d, particles, scenarios, bundle.seed());
    let mut y_buf = vec![0.0; m_dim];
    let mut grad_buf = vec![0.0; m_dim * d];
    for sc in 0..scenarios {
        let common = bundle.cumulative_path(crate::paths::PathKind::Common, sc, 0)?;
        for i in 0..particles {
            let idio = bundle.cumulative_path(crate::paths::PathKind::Idiosyncratic, sc, i)?;
            for k in 0..=steps {
                let t = sol.grid().node(k);
                (form.y)(
                    t,
                    horizon,
                    &idio[k * d..(k + 1) * d],
                    &common[k * d..(k + 1) * d],
                    &mut y_buf,
                );
                sol.y_mut(sc, i, k).copy_from_slice(&y_buf);
                if k < steps {
                    (form.z)(t, horizon, &mut grad_buf);
                    sol.z_mut(sc, i, k).copy_from_slice(&grad_buf);
                    (form.z0)(t, horizon, &mut grad_buf);
                    sol.z0_mut(sc, i, k).copy_from_slice(&grad_buf);
                }
            }
        }
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;

    fn cloud(points: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(points.to_vec(), 1).unwrap()
    }

    #[test]
    fn zero_driver_is_identically_zero() {
        let spec = ModelSpec::zero(3.0, 1);
        let mu = cloud(&[1.0, -5.0]);
        let out = spec.eval_driver(0.3, &[9.9], &[1.0], &[2.0], &mu).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn linear_mean_driver_matches_formula() {
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let mu = cloud(&[2.0, 4.0]);
        let out = spec.eval_driver(0.0, &[0.0], &[0.0], &[0.0], &mu).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn w2_interaction_vanishes_at_dirac_origin() {
        let spec = ModelSpec::w2_interaction(0.7, 1.0, 1);
        let mu = EmpiricalMeasure::dirac_origin(1);
        let out = spec.eval_driver(0.1, &[1.0], &[1.0], &[1.0], &mu).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn driver_shape_checks() {
        let spec = ModelSpec::linear_mean(0.5, 1.0, 2);
        let mu = cloud(&[0.0]);
        // z must be m * d = 2 long.
        assert!(spec.eval_driver(0.0, &[0.0], &[0.0], &[0.0, 0.0], &mu).is_err());
        let planar = EmpiricalMeasure::new(vec![0.0, 0.0], 2).unwrap();
        assert!(spec
            .eval_driver(0.0, &[0.0], &[0.0, 0.0], &[0.0, 0.0], &planar)
            .is_err());
    }

    #[test]
    fn non_finite_driver_output_is_reported() {
        let spec = ModelSpec::custom(
            "bad",
            1,
            1,
            1.0,
            Arc::new(|_, y, _, _, _, out| out[0] = 1.0 / (y[0] - y[0])),
            Arc::new(|_, _, out| out[0] = 0.0),
        );
        let mu = cloud(&[0.0]);
        let err = spec.eval_driver(0.0, &[1.0], &[0.0], &[0.0], &mu).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn probe_zero_model_estimates_zero() {
        let spec = ModelSpec::zero(1.0, 1);
        let probe = lipschitz_probe(&spec, 50, 3).unwrap();
        assert_eq!(probe.estimate, 0.0);
        assert!(!probe.violation);
    }

    #[test]
    fn probe_linear_mean_stays_within_declaration() {
        // |mean(mu) - mean(nu)| <= W_1 <= W_2, so the quotient never exceeds a.
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let probe = lipschitz_probe(&spec, 400, 7).unwrap();
        assert!(probe.estimate > 0.0, "estimate should be positive");
        assert!(
            probe.estimate <= 0.5 * (1.0 + 1e-9),
            "estimate {} exceeds 0.5",
            probe.estimate
        );
        assert!(!probe.violation);
    }

    #[test]
    fn probe_flags_understated_constant() {
        // f = y with declared constant 0.1: the probe must exceed it.
        let spec = ModelSpec::custom(
            "understated",
            1,
            1,
            0.1,
            Arc::new(|_, y, _, _, _, out| out[0] = y[0]),
            Arc::new(|_, _, out| out[0] = 0.0),
        );
        let probe = lipschitz_probe(&spec, 400, 11).unwrap();
        assert!(probe.violation, "probe {probe:?} should flag violation");
        assert!(probe.estimate > 0.1);
    }

    #[test]
    fn closed_forms_match_terminal_condition_at_horizon() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let bundle = PathBundle::sample(&grid, 3, 2, 1, 9).unwrap();
        for spec in [
            ModelSpec::zero(2.0, 1),
            ModelSpec::martingale(1),
            ModelSpec::linear_mean(0.5, 1.0, 1),
        ] {
            let sol = closed_form_reference(&spec, &bundle).unwrap();
            let mut want = vec![0.0];
            for sc in 0..2 {
                let common = bundle
                    .cumulative_path(crate::paths::PathKind::Common, sc, 0)
                    .unwrap();
                for i in 0..3 {
                    let idio = bundle
                        .cumulative_path(crate::paths::PathKind::Idiosyncratic, sc, i)
                        .unwrap();
                    spec.terminal_into(&idio[8..9], &common[8..9], &mut want);
                    let got = sol.y(sc, i, 8)[0];
                    assert!(
                        (got - want[0]).abs() < 1e-12,
                        "model {} terminal mismatch: {got} vs {}",
                        spec.name(),
                        want[0]
                    );
                }
            }
        }
    }

    #[test]
    fn no_closed_form_is_unsupported() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let bundle = PathBundle::sample(&grid, 2, 1, 1, 0).unwrap();
        let spec = ModelSpec::w2_interaction(0.5, 1.0, 1);
        assert!(matches!(
            closed_form_reference(&spec, &bundle),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn martingale_reference_matches_monte_carlo_conditional_expectation() {
        // Independent oracle: E[xi | W_t = w, common path] estimated by
        // averaging xi over resampled Brownian futures.
        let spec = ModelSpec::martingale(1);
        let form = spec.closed_form().unwrap();
        let (t, horizon) = (0.4f64, 1.0f64);
        let w_t = 0.7;
        let w0_t = -0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let samples = 200_000;
        let remaining = (horizon - t).sqrt();
        let mut acc = 0.0;
        for _ in 0..samples {
            let g: f64 = rng.sample(StandardNormal);
            let g0: f64 = rng.sample(StandardNormal);
            let w_end = w_t + g * remaining;
            let w0_end = w0_t + g0 * remaining;
            let mut xi = vec![0.0];
            spec.terminal_into(&[w_end], &[w0_end], &mut xi);
            acc += xi[0];
        }
        let mc = acc / samples as f64;
        let mut y_ref = vec![0.0];
        (form.y)(t, horizon, &[w_t], &[w0_t], &mut y_ref);
        // Monte Carlo stderr: sqrt(2 (T - t)) / sqrt(samples) ~ 0.0025.
        assert!(
            (mc - y_ref[0]).abs() < 0.01,
            "MC {mc} vs closed form {}",
            y_ref[0]
        );
        // Conditional law: mean W0_t, variance t.
        let law = (form.cond_law.as_ref().unwrap())(t, horizon, &[w0_t]);
        assert!((law.mean - w0_t).abs() < 1e-12);
        assert!((law.variance - t).abs() < 1e-12);
    }

    #[test]
    fn linear_mean_conditional_mean_matches_backward_ode() {
        // Independent oracle: integrate g' = -a g backwards with RK4 from
        // g(T) = 1 and compare the factor in front of (c + W0_t).
        let a = 0.5;
        let c = 1.0;
        let spec = ModelSpec::linear_mean(a, c, 1);
        let form = spec.closed_form().unwrap();
        let horizon = 1.0;
        let steps = 200;
        let h = horizon / steps as f64;
        let mut g = 1.0f64;
        let deriv = |g: f64| a * g; // integrating backwards: dg/ds = +a g with s = T - t
        let mut factors = vec![1.0f64];
        for _ in 0..steps {
            let k1 = deriv(g);
            let k2 = deriv(g + 0.5 * h * k1);
            let k3 = deriv(g + 0.5 * h * k2);
            let k4 = deriv(g + h * k3);
            g += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            factors.push(g);
        }
        for (j, factor) in factors.iter().enumerate() {
            let t = horizon - j as f64 * h;
            for w0 in [-0.8, 0.0, 1.3] {
                let law = (form.cond_law.as_ref().unwrap())(t, horizon, &[w0]);
                let want = factor * (c + w0);
                assert!(
                    (law.mean - want).abs() < 1e-9 * (1.0 + want.abs()),
                    "t = {t}: closed form {} vs ODE {want}",
                    law.mean
                );
            }
        }
    }

    #[test]
    fn linear_mean_with_zero_rate_degenerates_to_shifted_martingale() {
        let lm = ModelSpec::linear_mean(0.0, 2.5, 1);
        let mg = ModelSpec::martingale(1);
        let lm_form = lm.closed_form().unwrap();
        let mg_form = mg.closed_form().unwrap();
        for (t, w, w0) in [(0.0, 0.3, -0.2), (0.5, -1.0, 0.4), (1.0, 0.0, 0.0)] {
            let mut a = vec![0.0];
            let mut b = vec![0.0];
            (lm_form.y)(t, 1.0, &[w], &[w0], &mut a);
            (mg_form.y)(t, 1.0, &[w], &[w0], &mut b);
            assert!((a[0] - (b[0] + 2.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn zoo_drivers_are_square_integrable_at_origin() {
        // (1/K) sum |f(t_k, 0, 0, 0, delta_0)|^2 finite for every zoo model.
        let origin = EmpiricalMeasure::dirac_origin(1);
        for spec in [
            ModelSpec::zero(1.0, 1),
            ModelSpec::martingale(1),
            ModelSpec::linear_mean(0.5, 1.0, 1),
            ModelSpec::w2_interaction(0.5, 1.0, 1),
        ] {
            let grid = TimeGrid::new(1.0, 32).unwrap();
            let mut acc = 0.0;
            for k in 0..32 {
                let f = spec
                    .eval_driver(grid.node(k), &[0.0], &[0.0], &[0.0], &origin)
                    .unwrap();
                acc += f[0] * f[0];
            }
            acc /= 32.0;
            assert!(acc.is_finite());
        }
    }

    #[test]
    fn from_config_resolves_and_validates() {
        let params = BTreeMap::from([("a".to_string(), 0.25)]);
        let spec = ModelSpec::from_config("linear-mean", &params, 1).unwrap();
        assert_eq!(spec.lipschitz(), 0.25);
        assert!(ModelSpec::from_config("no-such-model", &BTreeMap::new(), 1).is_err());
        let bad = BTreeMap::from([("q".to_string(), 1.0)]);
        assert!(ModelSpec::from_config("zero", &bad, 1).is_err());
    }
}
