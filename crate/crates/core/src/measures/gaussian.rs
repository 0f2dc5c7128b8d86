//! Scalar Gaussian laws and their quantile discretizations.

use super::EmpiricalMeasure;

/// A one-dimensional Gaussian, used as the closed-form conditional law of the
/// model zoo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLaw {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianLaw {
    pub fn new(mean: f64, variance: f64) -> Self {
        assert!(variance >= 0.0, "variance must be nonnegative");
        GaussianLaw { mean, variance }
    }

    /// Discretize into `atoms` equally weighted quantile atoms at the
    /// midpoints `(j + 1/2) / atoms` of the uniform grid on (0, 1).
    pub fn quantile_measure(&self, atoms: usize) -> EmpiricalMeasure {
        assert!(atoms >= 1);
        let sd = self.variance.sqrt();
        let points: Vec<f64> = (0..atoms)
            .map(|j| {
                let u = (j as f64 + 0.5) / atoms as f64;
                self.mean + sd * inverse_normal_cdf(u)
            })
            .collect();
        EmpiricalMeasure::new(points, 1).expect("quantile atoms are finite")
    }
}

/// Standard normal quantiles at the midpoints `(j + 1/2) / atoms`, shared
/// by every Gaussian quantile discretization (atoms of `N(mu, sigma^2)` are
/// the affine transform `mu + sigma * q_j`).
pub fn standard_quantile_table(atoms: usize) -> Vec<f64> {
    assert!(atoms >= 1);
    (0..atoms)
        .map(|j| inverse_normal_cdf((j as f64 + 0.5) / atoms as f64))
        .collect()
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 on (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1), got {p}");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        q * (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5])
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard normal CDF by Simpson quadrature of the density, an oracle
    /// independent of the rational approximation above.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let lo = (-12.0_f64).min(x - 1.0);
        let steps = 40_000usize;
        let h = (x - lo) / steps as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(lo) + pdf(x);
        for i in 1..steps {
            let t = lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
        }
        acc * h / 3.0
    }

    #[test]
    fn inverse_cdf_inverts_quadrature_cdf() {
        for &p in &[1e-6, 1e-3, 0.02, 0.1, 0.25, 0.5, 0.77, 0.9, 0.99, 0.9999] {
            let x = inverse_normal_cdf(p);
            let back = normal_cdf_quadrature(x);
            assert!(
                (back - p).abs() < 1e-8,
                "p = {p}: inverse gave {x}, quadrature CDF returns {back}"
            );
        }
    }

    #[test]
    fn inverse_cdf_is_antisymmetric() {
        for &p in &[0.001, 0.1, 0.3, 0.49] {
            let a = inverse_normal_cdf(p);
            let b = inverse_normal_cdf(1.0 - p);
            assert!((a + b).abs() < 1e-9);
        }
        assert!(inverse_normal_cdf(0.5).abs() < 1e-12);
    }

    #[test]
    fn quantile_measure_matches_moments() {
        let law = GaussianLaw::new(2.0, 9.0);
        let mu = law.quantile_measure(1 << 14);
        let mean = mu.mean()[0];
        let var = mu.points().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / mu.len() as f64;
        assert!((mean - 2.0).abs() < 1e-6);
        // Midpoint quantile discretization slightly underestimates the
        // variance at finite resolution.
        assert!((var - 9.0).abs() < 0.01);
    }

    #[test]
    fn degenerate_law_collapses_to_dirac() {
        let law = GaussianLaw::new(-1.5, 0.0);
        let mu = law.quantile_measure(64);
        assert!(mu.points().iter().all(|&x| x == -1.5));
    }
}
