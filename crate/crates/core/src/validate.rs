//! The `validate` verb: a fast cross-module invariant suite. Each check is
//! deterministic in the seed and prints one pass/fail line through the CLI.

use serde::Serialize;

use crate::backward::SchemeConfig;
use crate::error::Result;
use crate::limit::{default_alpha, solve_coupled_system, solve_limit_picard};
use crate::measures::{
    coupling_upper_bound, min_cost_assignment, moment_distance_to_dirac, wasserstein_2_assignment,
    wasserstein_p_1d, EmpiricalMeasure,
};
use crate::model::{lipschitz_probe, ModelSpec};
use crate::particle::solve_particle_system;
use crate::paths::{PathBundle, TimeGrid};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, outcome: std::result::Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult {
            name: name.into(),
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name: name.into(),
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, ok: &str, bad: String) -> std::result::Result<String, String> {
    if cond {
        Ok(ok.to_string())
    } else {
        Err(bad)
    }
}

fn random_cloud(seed: u64, len: usize) -> EmpiricalMeasure {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    EmpiricalMeasure::new(points, 1).expect("finite cloud")
}

/// Run the whole invariant suite. Returns one result per check.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let grid = TimeGrid::new(1.0, 16)?;
    let scheme = SchemeConfig::default();

    results.push(check("paths/reproducibility", {
        let a = PathBundle::sample(&grid, 6, 3, 1, seed)?;
        let b = PathBundle::sample(&grid, 6, 3, 1, seed)?;
        ensure(a == b, "same seed, bit-identical bundles", "bundles differ".into())
    }));

    results.push(check("paths/common-stream-invariance", {
        let small = PathBundle::sample(&grid, 2, 3, 1, seed)?;
        let large = PathBundle::sample(&grid, 9, 3, 1, seed)?;
        let same = (0..3).all(|sc| {
            (0..16).all(|k| small.common_increment(sc, k) == large.common_increment(sc, k))
        });
        ensure(
            same,
            "common increments unchanged as n grows",
            "common stream depends on particle count".into(),
        )
    }));

    results.push(check("paths/increment-moments", {
        let fine = TimeGrid::new(1.0, 2000)?;
        let b = PathBundle::sample(&fine, 1, 1, 1, seed ^ 0x11)?;
        let dt = fine.dt();
        let mut mean = 0.0;
        let mut var = 0.0;
        for k in 0..2000 {
            mean += b.idio_increment(0, 0, k)[0];
        }
        mean /= 2000.0;
        for k in 0..2000 {
            let x = b.idio_increment(0, 0, k)[0] - mean;
            var += x * x;
        }
        var /= 1999.0;
        ensure(
            var > 0.9 * dt && var < 1.1 * dt && mean.abs() < 4.0 * (dt / 2000.0).sqrt(),
            "increment mean and variance within tolerance",
            format!("mean {mean:.3e}, variance {var:.3e} vs dt {dt:.3e}"),
        )
    }));

    results.push(check("paths/stream-independence", {
        let b = PathBundle::sample(&TimeGrid::new(1.0, 100)?, 10, 10, 1, seed ^ 0x22)?;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let count = 10 * 10 * 100;
        for sc in 0..10 {
            for i in 0..10 {
                for k in 0..100 {
                    let x = b.idio_increment(sc, i, k)[0];
                    let y = b.common_increment(sc, k)[0];
                    sxy += x * y;
                    sxx += x * x;
                    syy += y * y;
                }
            }
        }
        let corr = sxy / (sxx * syy).sqrt();
        ensure(
            corr.abs() < 4.0 / (count as f64).sqrt(),
            "common and idiosyncratic streams uncorrelated",
            format!("correlation {corr:.4}"),
        )
    }));

    results.push(check("measures/metric-axioms", {
        let mut ok = true;
        let mut detail = String::new();
        for trial in 0..20u64 {
            let a = random_cloud(seed ^ (trial * 3 + 1), 5);
            let b = random_cloud(seed ^ (trial * 3 + 2), 5);
            let c = random_cloud(seed ^ (trial * 3 + 3), 5);
            let ab = wasserstein_p_1d(&a, &b, 2.0)?.value;
            let ba = wasserstein_p_1d(&b, &a, 2.0)?.value;
            let bc = wasserstein_p_1d(&b, &c, 2.0)?.value;
            let ac = wasserstein_p_1d(&a, &c, 2.0)?.value;
            let aa = wasserstein_p_1d(&a, &a, 2.0)?.value;
            let w4 = wasserstein_p_1d(&a, &b, 4.0)?.value;
            if (ab - ba).abs() > 1e-12 || ac > ab + bc + 1e-10 || aa != 0.0 || ab > w4 + 1e-10 {
                ok = false;
                detail = format!("violation in trial {trial}");
                break;
            }
        }
        ensure(ok, "symmetry, triangle, identity, order monotonicity", detail)
    }));

    results.push(check("measures/assignment-vs-sorted", {
        let mut worst = 0.0f64;
        for trial in 0..10u64 {
            let a = random_cloud(seed ^ (trial + 100), 6);
            let b = random_cloud(seed ^ (trial + 200), 6);
            let s = wasserstein_p_1d(&a, &b, 2.0)?.value;
            let g = wasserstein_2_assignment(&a, &b)?.value;
            worst = worst.max((s - g).abs());
        }
        ensure(
            worst < 1e-12,
            "assignment agrees with the sorted coupling in 1D",
            format!("max gap {worst:e}"),
        )
    }));

    results.push(check("measures/assignment-brute-force", {
        // 4-point clouds against exhaustive enumeration.
        let mut ok = true;
        for trial in 0..10u64 {
            let a = random_cloud(seed ^ (trial + 300), 4);
            let b = random_cloud(seed ^ (trial + 400), 4);
            let got = wasserstein_2_assignment(&a, &b)?.value;
            let mut best = f64::INFINITY;
            let perms = [
                [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2],
                [0, 3, 2, 1], [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0],
                [1, 3, 0, 2], [1, 3, 2, 0], [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3],
                [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0], [3, 0, 1, 2], [3, 0, 2, 1],
                [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
            ];
            for perm in perms {
                let cost: f64 = (0..4)
                    .map(|i| {
                        let d = a.point(i)[0] - b.point(perm[i])[0];
                        d * d
                    })
                    .sum::<f64>()
                    / 4.0;
                best = best.min(cost);
            }
            if (got * got - best).abs() > 1e-10 {
                ok = false;
                break;
            }
        }
        ensure(ok, "assignment equals the exhaustive minimum", "mismatch".into())
    }));

    results.push(check("measures/identity-coupling-bound", {
        let mut ok = true;
        for trial in 0..20u64 {
            let a = random_cloud(seed ^ (trial + 500), 6);
            let b = random_cloud(seed ^ (trial + 600), 6);
            let (w2sq, paired) = coupling_upper_bound(&a, &b)?;
            if w2sq > paired + 1e-12 {
                ok = false;
                break;
            }
        }
        ensure(ok, "squared distance below the identity coupling", "bound violated".into())
    }));

    results.push(check("measures/dirac-moment-homogeneity", {
        let a = random_cloud(seed ^ 700, 8);
        let scaled =
            EmpiricalMeasure::new(a.points().iter().map(|x| 2.5 * x).collect(), 1)?;
        let base = moment_distance_to_dirac(&a, 3.0)?;
        let big = moment_distance_to_dirac(&scaled, 3.0)?;
        ensure(
            (big - 2.5 * base).abs() < 1e-10,
            "scaling homogeneity",
            format!("{big} vs {}", 2.5 * base),
        )
    }));

    results.push(check("measures/assignment-permutation", {
        let (assignment, total) = min_cost_assignment(&[0.0, 1.0, 1.0, 0.0], 2);
        ensure(
            assignment == vec![0, 1] && total == 0.0,
            "diagonal optimum found",
            format!("assignment {assignment:?}, total {total}"),
        )
    }));

    let zero = ModelSpec::zero(1.5, 1);
    results.push(check("solver/constant-model-exactness", {
        let bundle = PathBundle::sample(&grid, 8, 2, 1, seed ^ 0x33)?;
        let sol = solve_particle_system(&zero, &bundle, &scheme)?;
        let mut worst = 0.0f64;
        for sc in 0..2 {
            for i in 0..8 {
                for k in 0..=16 {
                    worst = worst.max((sol.y(sc, i, k)[0] - 1.5).abs());
                }
            }
        }
        ensure(
            worst < 1e-10,
            "constant terminal reproduced exactly",
            format!("max deviation {worst:e}"),
        )
    }));

    results.push(check("solver/particle-coupled-identity", {
        let bundle = PathBundle::sample(&grid, 8, 2, 1, seed ^ 0x44)?;
        let particle = solve_particle_system(&zero, &bundle, &scheme)?;
        let (_, flow, _) = solve_limit_picard(&zero, &bundle, 1.0, 1e-6, 3, &scheme)?;
        let coupled = solve_coupled_system(&zero, &bundle, &flow, &scheme)?;
        let identical = (0..2).all(|sc| {
            (0..8).all(|i| (0..=16).all(|k| particle.y(sc, i, k) == coupled.y(sc, i, k)))
        });
        ensure(
            identical,
            "interaction-free systems coincide bitwise",
            "solutions differ".into(),
        )
    }));

    results.push(check("solver/terminal-exactness", {
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let bundle = PathBundle::sample(&grid, 8, 2, 1, seed ^ 0x55)?;
        let sol = solve_particle_system(&spec, &bundle, &scheme)?;
        let mut exact = true;
        let mut xi = vec![0.0];
        for sc in 0..2 {
            let common = bundle.cumulative_path(crate::paths::PathKind::Common, sc, 0)?;
            for i in 0..8 {
                let idio =
                    bundle.cumulative_path(crate::paths::PathKind::Idiosyncratic, sc, i)?;
                spec.terminal_into(&idio[16..17], &common[16..17], &mut xi);
                if sol.y(sc, i, 16)[0] != xi[0] {
                    exact = false;
                }
            }
        }
        ensure(exact, "terminal values match the terminal map exactly", "mismatch".into())
    }));

    results.push(check("solver/fixed-point-consistency", {
        let spec = ModelSpec::linear_mean(0.5, 1.0, 1);
        let bundle = PathBundle::sample(&grid, 64, 2, 1, seed ^ 0x66)?;
        let tol = 1e-3;
        let out = solve_limit_picard(
            &spec,
            &bundle,
            default_alpha(spec.lipschitz()),
            tol,
            20,
            &scheme,
        )?;
        ensure(
            out.2.converged,
            "outer iteration converged within tolerance",
            "did not converge".into(),
        )
    }));

    results.push(check("model/lipschitz-declarations", {
        let mut ok = true;
        let mut detail = String::new();
        for spec in [
            ModelSpec::zero(1.0, 1),
            ModelSpec::martingale(1),
            ModelSpec::linear_mean(0.5, 1.0, 1),
            ModelSpec::w2_interaction(0.5, 1.0, 1),
        ] {
            let probe = lipschitz_probe(&spec, 200, seed ^ 0x77)?;
            if probe.violation {
                ok = false;
                detail = format!("{} exceeds its declaration: {probe:?}", spec.name());
                break;
            }
        }
        ensure(ok, "sampled quotients within declared constants", detail)
    }));

    results.push(check("model/driver-integrability", {
        let origin = EmpiricalMeasure::dirac_origin(1);
        let mut ok = true;
        for spec in [
            ModelSpec::zero(1.0, 1),
            ModelSpec::martingale(1),
            ModelSpec::linear_mean(0.5, 1.0, 1),
            ModelSpec::w2_interaction(0.5, 1.0, 1),
        ] {
            let mut acc = 0.0;
            for k in 0..=16 {
                let f = spec.eval_driver(grid.node(k), &[0.0], &[0.0], &[0.0], &origin)?;
                acc += f[0] * f[0];
            }
            if !acc.is_finite() {
                ok = false;
            }
        }
        ensure(ok, "driver square-integrable at the origin", "non-finite".into())
    }));

    results.push(check("experiments/ordering-consistency", {
        use crate::experiments::rates::chaos_rate_experiment;
        use crate::experiments::ExperimentSetup;
        let setup = ExperimentSetup {
            horizon: 1.0,
            steps: 8,
            scenarios: 4,
            reference_particles: 64,
            replicas: 2,
            moment_order: 8.0,
            seed: seed ^ 0x88,
            scheme,
            alpha: None,
            tol: 1e-4,
            max_iter: 20,
        };
        let report = chaos_rate_experiment(&ModelSpec::martingale(1), &setup, &[8, 16, 32])?;
        let ok = report
            .error_sup_of_mean
            .iter()
            .zip(&report.error_mean_of_sup)
            .all(|(a, b)| a <= &(b + 1e-12));
        ensure(
            ok,
            "sup of averages below average of sups",
            "ordering inverted".into(),
        )
    }));

    results.push(check("experiments/theoretical-rate-monotone", {
        use crate::experiments::rates::{theoretical_rate, RateBound};
        let mut ok = true;
        for d in [1usize, 4, 6] {
            for bound in [RateBound::ConditionalAverage, RateBound::Uniform] {
                let mut prev = f64::INFINITY;
                for n in [8usize, 32, 128, 512] {
                    let v = theoretical_rate(d, 8.0, n, bound).map_err(|e| {
                        crate::error::Error::Internal(format!("rate eval failed: {e}"))
                    })?;
                    if v >= prev {
                        ok = false;
                    }
                    prev = v;
                }
            }
        }
        ensure(ok, "bounds strictly decreasing on the sweep range", "not monotone".into())
    }));

    results.push(check("experiments/domination-terminal-equality", {
        use crate::experiments::coupling::coupling_error_experiment;
        use crate::experiments::ExperimentSetup;
        let setup = ExperimentSetup {
            horizon: 1.0,
            steps: 8,
            scenarios: 2,
            reference_particles: 64,
            replicas: 1,
            moment_order: 8.0,
            seed: seed ^ 0x99,
            scheme,
            alpha: None,
            tol: 1e-3,
            max_iter: 20,
        };
        let report =
            coupling_error_experiment(&ModelSpec::linear_mean(0.5, 1.0, 1), &setup, &[8, 16])?;
        let ok = report.entries.iter().all(|e| e.domination_terminal_equal);
        ensure(
            ok,
            "terminal distances agree exactly",
            "terminal mismatch".into(),
        )
    }));

    Ok(results)
}
