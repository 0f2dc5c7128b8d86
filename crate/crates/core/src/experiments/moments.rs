//! Moment and increment-scaling diagnostics of the solved systems: sup
//! moments, increment laws over time lags, product-increment scaling,
//! conditional-sup scaling, and the uniform-in-n second-moment bound of the
//! particle system.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::rates::fit_power_law;
use crate::experiments::ExperimentSetup;
use crate::limit::solve_limit_picard;
use crate::model::ModelSpec;
use crate::particle::solve_particle_system;
use crate::paths::PathBundle;

/// All statistics are deterministic functions of `(setup, seed)`.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub model: String,
    pub moment_order: f64,
    /// Time lags (in time units) the increment statistics are evaluated at.
    pub lags: Vec<f64>,
    /// `mean |Y_{s+l} - Y_s|^2` per lag and its fitted log-log slope.
    pub increment_p2: Vec<f64>,
    pub slope_increment_p2: Option<f64>,
    /// Same at the report's moment order.
    pub increment_p: Vec<f64>,
    pub slope_increment_p: Option<f64>,
    /// Product of adjacent increment p-th powers against the enclosing span.
    pub product: Vec<f64>,
    pub product_span: Vec<f64>,
    pub slope_product: Option<f64>,
    /// `mean sup_u (conditional mean square increment)^p` per lag.
    pub conditional_sup: Vec<f64>,
    pub slope_conditional_sup: Option<f64>,
    /// Sup-moment statistic at the base size and at doubled (cloud,
    /// scenario) sizes; stable when they agree within 10%.
    pub sup_moment_base: f64,
    pub sup_moment_doubled: f64,
    pub sup_moment_stable: bool,
    /// Uniform-in-n bound: per-n worst-rerun second-moment statistic of the
    /// particle system.
    pub uniform_n: Vec<usize>,
    pub uniform_stats: Vec<f64>,
    pub uniform_max_min_ratio: Option<f64>,
    pub degenerate: bool,
}

fn sup_moment(
    spec: &ModelSpec,
    setup: &ExperimentSetup,
    particles: usize,
    scenarios: usize,
    p: f64,
) -> Result<f64> {
    let grid = setup.grid()?;
    let bundle = PathBundle::sample(&grid, particles, scenarios, spec.noise_dim(), setup.seed)?;
    let (solution, _, _) = solve_limit_picard(
        spec,
        &bundle,
        setup.alpha_for(spec),
        setup.tol,
        setup.max_iter,
        &setup.scheme,
    )?;
    let mut acc = 0.0;
    for sc in 0..scenarios {
        for i in 0..particles {
            let sup = (0..=setup.steps)
                .map(|k| solution.y(sc, i, k).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0f64, f64::max);
            acc += sup.powf(p);
        }
    }
    Ok(acc / (scenarios * particles) as f64)
}

/// Lag set `{2 dt, ...}` doubling up to a quarter of the horizon.
fn lag_steps(steps: usize) -> Vec<usize> {
    let mut lags = Vec::new();
    let mut j = 2usize;
    while j * 4 <= steps {
        lags.push(j);
        j *= 2;
    }
    if lags.len() < 3 {
        // Small grids: take whatever distinct lags fit.
        lags = (2..=steps.max(2) / 2).collect();
        lags.truncate(4);
    }
    lags
}

/// Moment and increment diagnostics for one model.
pub fn moment_suite(
    spec: &ModelSpec,
    setup: &ExperimentSetup,
    uniform_n: &[usize],
    reruns: usize,
) -> Result<MomentReport> {
    setup.validate()?;
    let p = setup.moment_order;
    if !(p >= 2.0) {
        return Err(Error::invalid("moment order must be >= 2"));
    }
    if reruns < 1 {
        return Err(Error::invalid("need at least one rerun"));
    }
    let grid = setup.grid()?;
    let steps = setup.steps;
    let dt = grid.dt();
    let scenarios = setup.scenarios;
    let n_ref = setup.reference_particles;

    // Reference solution cloud: the solved limit system.
    let bundle = PathBundle::sample(&grid, n_ref, scenarios, spec.noise_dim(), setup.seed)?;
    let (solution, _, _) = solve_limit_picard(
        spec,
        &bundle,
        setup.alpha_for(spec),
        setup.tol,
        setup.max_iter,
        &setup.scheme,
    )?;

    let lags = lag_steps(steps);
    let lag_times: Vec<f64> = lags.iter().map(|j| *j as f64 * dt).collect();
    let norm = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    let mut increment_p2 = Vec::with_capacity(lags.len());
    let mut increment_p = Vec::with_capacity(lags.len());
    let mut product = Vec::with_capacity(lags.len());
    let mut product_span = Vec::with_capacity(lags.len());
    let mut conditional_sup = Vec::with_capacity(lags.len());
    for &j in &lags {
        let mut acc2 = 0.0f64;
        let mut acc_p = 0.0f64;
        let mut count = 0usize;
        let mut prod_acc = 0.0f64;
        let mut prod_count = 0usize;
        let mut cond_acc = 0.0f64;
        let mut cond_count = 0usize;
        for sc in 0..scenarios {
            for s in 0..=steps - j {
                // Conditional mean-square increment over the window,
                // estimated across the conditionally independent cloud.
                let mut sup_cond = 0.0f64;
                for u in s + 1..=s + j {
                    let mut cond = 0.0;
                    for i in 0..n_ref {
                        let gap = norm(solution.y(sc, i, u), solution.y(sc, i, s));
                        cond += gap * gap;
                    }
                    sup_cond = sup_cond.max(cond / n_ref as f64);
                }
                cond_acc += sup_cond.powf(p);
                cond_count += 1;
            }
            for i in 0..n_ref {
                for s in 0..=steps - j {
                    let gap = norm(solution.y(sc, i, s + j), solution.y(sc, i, s));
                    acc2 += gap * gap;
                    acc_p += gap.powf(p);
                    count += 1;
                }
                for s in j..=steps - j {
                    let left = norm(solution.y(sc, i, s), solution.y(sc, i, s - j));
                    let right = norm(solution.y(sc, i, s + j), solution.y(sc, i, s));
                    prod_acc += left.powf(p) * right.powf(p);
                    prod_count += 1;
                }
            }
        }
        increment_p2.push(acc2 / count as f64);
        increment_p.push(acc_p / count as f64);
        if prod_count > 0 {
            product.push(prod_acc / prod_count as f64);
            product_span.push(2.0 * j as f64 * dt);
        }
        conditional_sup.push(cond_acc / cond_count as f64);
    }

    let degenerate = increment_p2.iter().all(|v| *v < 1e-24);
    let slope_of = |xs: &[f64], ys: &[f64]| -> Option<f64> {
        if degenerate || xs.len() < 3 || ys.iter().any(|v| *v <= 0.0) {
            None
        } else {
            fit_power_law(xs, ys).ok().map(|f| f.slope)
        }
    };
    let slope_increment_p2 = slope_of(&lag_times, &increment_p2);
    let slope_increment_p = slope_of(&lag_times, &increment_p);
    let slope_product = slope_of(&product_span, &product);
    let slope_conditional_sup = slope_of(&lag_times, &conditional_sup);

    // Finiteness proxy: the sup-moment statistic must be stable when the
    // cloud and scenario counts double.
    let sup_moment_base = sup_moment(spec, setup, n_ref, scenarios, p)?;
    let sup_moment_doubled = sup_moment(spec, setup, 2 * n_ref, 2 * scenarios, p)?;
    let sup_moment_stable = if sup_moment_base.abs() < 1e-24 {
        sup_moment_doubled.abs() < 1e-24
    } else {
        (sup_moment_doubled / sup_moment_base - 1.0).abs() <= 0.1
    };

    // Uniform-in-n second-moment bound of the particle system, worst case
    // over reruns with distinct seeds.
    let mut uniform_stats = Vec::with_capacity(uniform_n.len());
    for &n in uniform_n {
        let mut per_particle_worst = vec![0.0f64; n];
        for r in 0..reruns {
            let seed = setup.seed.wrapping_add(1000 * r as u64);
            let b = PathBundle::sample(&grid, n, scenarios, spec.noise_dim(), seed)?;
            let sol = solve_particle_system(spec, &b, &setup.scheme)?;
            for (i, worst) in per_particle_worst.iter_mut().enumerate() {
                let mut stat = 0.0;
                for sc in 0..scenarios {
                    let sup_y = (0..=steps)
                        .map(|k| sol.y(sc, i, k).iter().map(|v| v * v).sum::<f64>())
                        .fold(0.0f64, f64::max);
                    let mut integral = 0.0;
                    for k in 0..steps {
                        integral += sol.z(sc, i, k).iter().map(|v| v * v).sum::<f64>() * dt;
                        integral += sol.z0(sc, i, k).iter().map(|v| v * v).sum::<f64>() * dt;
                    }
                    stat += sup_y + integral;
                }
                *worst = worst.max(stat / scenarios as f64);
            }
        }
        uniform_stats.push(per_particle_worst.iter().sum::<f64>() / n as f64);
    }
    let uniform_max_min_ratio = if uniform_stats.len() >= 2
        && uniform_stats.iter().all(|v| *v > 0.0)
    {
        let max = uniform_stats.iter().cloned().fold(f64::MIN, f64::max);
        let min = uniform_stats.iter().cloned().fold(f64::MAX, f64::min);
        Some(max / min)
    } else {
        None
    };

    Ok(MomentReport {
        model: spec.name().to_string(),
        moment_order: p,
        lags: lag_times,
        increment_p2,
        slope_increment_p2,
        increment_p,
        slope_increment_p,
        product,
        product_span,
        slope_product,
        conditional_sup,
        slope_conditional_sup,
        sup_moment_base,
        sup_moment_doubled,
        sup_moment_stable,
        uniform_n: uniform_n.to_vec(),
        uniform_stats,
        uniform_max_min_ratio,
        degenerate,
    })
}
