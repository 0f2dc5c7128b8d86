//! Pooled least-squares regression used to estimate conditional
//! expectations from simulated samples.
//!
//! The backward solvers regress next-step values on polynomial features of
//! the current Brownian states. The normal equations are solved by Cholesky
//! with an optional ridge term; a leading all-ones column is recognized as
//! the intercept and left unpenalized, so constant targets are reproduced
//! exactly. Rank-deficient systems at `lambda = 0` fall back to the
//! minimal-norm solution through a symmetric eigendecomposition and are
//! flagged.

use crate::error::{Error, Result};

/// Polynomial features of total degree at most `degree` in `vars` variables.
/// The constant monomial always comes first.
#[derive(Debug, Clone)]
pub struct PolyBasis {
    vars: usize,
    exponents: Vec<Vec<u32>>,
}

impl PolyBasis {
    pub fn total_degree(vars: usize, degree: u32) -> Self {
        assert!(vars >= 1);
        let mut exponents: Vec<Vec<u32>> = Vec::new();
        let mut current = vec![0u32; vars];
        // Enumerate by total degree, lexicographically within each degree.
        fn rec(exps: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, var: usize, remaining: u32) {
            if var + 1 == current.len() {
                current[var] = remaining;
                exps.push(current.clone());
                current[var] = 0;
                return;
            }
            for take in (0..=remaining).rev() {
                current[var] = take;
                rec(exps, current, var + 1, remaining - take);
            }
            current[var] = 0;
        }
        for total in 0..=degree {
            rec(&mut exponents, &mut current, 0, total);
        }
        PolyBasis { vars, exponents }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.vars);
        debug_assert_eq!(out.len(), self.exponents.len());
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            let mut acc = 1.0;
            for (xi, &e) in x.iter().zip(exps) {
                for _ in 0..e {
                    acc *= xi;
                }
            }
            *slot = acc;
        }
    }
}

/// A fitted linear predictor with one coefficient column per target.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// Row-major `[feature][target]` coefficients.
    coeffs: Vec<f64>,
    num_features: usize,
    num_targets: usize,
    /// Set when the normal system was rank deficient and the minimal-norm
    /// solution was used.
    rank_deficient: bool,
}

impl RegressionFit {
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// Evaluate the predictor on one feature row.
    pub fn predict_into(&self, features: &[f64], out: &mut [f64]) {
        debug_assert_eq!(features.len(), self.num_features);
        debug_assert_eq!(out.len(), self.num_targets);
        out.fill(0.0);
        for (f, row) in features
            .iter()
            .zip(self.coeffs.chunks_exact(self.num_targets))
        {
            for (o, c) in out.iter_mut().zip(row) {
                *o += f * c;
            }
        }
    }

    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_targets];
        self.predict_into(features, &mut out);
        out
    }
}

/// Least-squares fit of `targets ~ features` with ridge strength `lambda`.
///
/// `features` is row-major `[samples][num_features]`, `targets` row-major
/// `[samples][num_targets]`. A leading all-ones column is treated as the
/// intercept and excluded from the penalty.
pub fn regress_conditional(
    features: &[f64],
    num_features: usize,
    targets: &[f64],
    num_targets: usize,
    lambda: f64,
) -> Result<RegressionFit> {
    if num_features == 0 || num_targets == 0 {
        return Err(Error::invalid("feature and target dimensions must be >= 1"));
    }
    if features.len() % num_features != 0 || targets.len() % num_targets != 0 {
        return Err(Error::invalid("ragged feature or target matrix"));
    }
    let samples = features.len() / num_features;
    if samples == 0 || targets.len() / num_targets != samples {
        return Err(Error::invalid(format!(
            "feature rows ({samples}) and target rows ({}) disagree",
            targets.len() / num_targets
        )));
    }
    if samples < num_features {
        return Err(Error::invalid(format!(
            "need at least as many samples ({samples}) as features ({num_features})"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("ridge strength must be nonnegative"));
    }
    if !features.iter().all(|x| x.is_finite()) || !targets.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("regression input contains non-finite values".into()));
    }

    let f = num_features;
    let t = num_targets;

    // Normal matrix and right-hand side, accumulated in sample order.
    let mut normal = vec![0.0f64; f * f];
    let mut rhs = vec![0.0f64; f * t];
    for s in 0..samples {
        let row = &features[s * f..(s + 1) * f];
        let y = &targets[s * t..(s + 1) * t];
        for a in 0..f {
            let xa = row[a];
            if xa == 0.0 {
                continue;
            }
            for b in a..f {
                normal[a * f + b] += xa * row[b];
            }
            for (r, yv) in rhs[a * t..(a + 1) * t].iter_mut().zip(y) {
                *r += xa * yv;
            }
        }
    }
    for a in 0..f {
        for b in 0..a {
            normal[a * f + b] = normal[b * f + a];
        }
    }

    let intercept_first = features
        .chunks_exact(f)
        .all(|row| row[0] == 1.0);
    let mut ridged = normal.clone();
    if lambda > 0.0 {
        let start = if intercept_first { 1 } else { 0 };
        for j in start..f {
            ridged[j * f + j] += lambda;
        }
    }

    if let Some(chol) = cholesky(&ridged, f) {
        let coeffs = cholesky_solve(&chol, f, &rhs, t);
        return Ok(RegressionFit {
            coeffs,
            num_features: f,
            num_targets: t,
            rank_deficient: false,
        });
    }

    // Singular normal system: minimal-norm solution via the eigendecomposition
    // of X^T X, flagged for the caller.
    let (eigvals, eigvecs) = jacobi_eigen(&normal, f);
    let max_eig = eigvals.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_eig * 1e-12 * f as f64;
    let mut coeffs = vec![0.0f64; f * t];
    for k in 0..f {
        if eigvals[k] <= tol {
            continue;
        }
        // Projection of rhs onto eigenvector k, scaled by 1/eigenvalue.
        for col in 0..t {
            let mut proj = 0.0;
            for a in 0..f {
                proj += eigvecs[a * f + k] * rhs[a * t + col];
            }
            let scale = proj / eigvals[k];
            for a in 0..f {
                coeffs[a * t + col] += scale * eigvecs[a * f + k];
            }
        }
    }
    Ok(RegressionFit {
        coeffs,
        num_features: f,
        num_targets: t,
        rank_deficient: true,
    })
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` when a
/// pivot is not strictly positive.
fn cholesky(matrix: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = matrix[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, rhs: &[f64], t: usize) -> Vec<f64> {
    let mut x = rhs.to_vec();
    // Forward substitution L y = rhs.
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            for col in 0..t {
                let sub = lik * x[k * t + col];
                x[i * t + col] -= sub;
            }
        }
        let d = l[i * n + i];
        for col in 0..t {
            x[i * t + col] /= d;
        }
    }
    // Back substitution L^T x = y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            for col in 0..t {
                let sub = lki * x[k * t + col];
                x[i * t + col] -= sub;
            }
        }
        let d = l[i * n + i];
        for col in 0..t {
            x[i * t + col] /= d;
        }
    }
    x
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and the column-eigenvector matrix.
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = matrix.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..n).map(|i| a[i * n + i]).collect();
    (eigvals, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_basis_counts_and_constant_first() {
        let basis = PolyBasis::total_degree(2, 2);
        assert_eq!(basis.len(), 6);
        let mut out = vec![0.0; 6];
        basis.eval_into(&[2.0, 3.0], &mut out);
        assert_eq!(out[0], 1.0);
        let mut sorted = out.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Monomials of (2, 3) up to degree 2: 1, 2, 3, 4, 6, 9.
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn constant_targets_are_reproduced_exactly() {
        let basis = PolyBasis::total_degree(1, 2);
        let xs = [-1.0, 0.5, 2.0, 3.0];
        let mut features = Vec::new();
        for &x in &xs {
            let mut row = vec![0.0; basis.len()];
            basis.eval_into(&[x], &mut row);
            features.extend(row);
        }
        let targets = vec![4.25; xs.len()];
        // Ridge on, intercept unpenalized: constants must survive exactly.
        let fit =
            regress_conditional(&features, basis.len(), &targets, 1, 1e-4).unwrap();
        for &x in &xs {
            let mut row = vec![0.0; basis.len()];
            basis.eval_into(&[x], &mut row);
            let pred = fit.predict(&row)[0];
            assert!((pred - 4.25).abs() < 1e-10, "prediction {pred}");
        }
        assert!(!fit.is_rank_deficient());
    }

    #[test]
    fn exact_linear_targets_interpolate() {
        let features: Vec<f64> = vec![
            1.0, 0.0, 1.0, //
            1.0, 1.0, -1.0, //
            1.0, 2.0, 0.5, //
            1.0, -1.0, 2.0, //
            1.0, 0.3, 0.7,
        ];
        let truth = |x1: f64, x2: f64| 2.0 - 3.0 * x1 + 0.5 * x2;
        let targets: Vec<f64> = features
            .chunks_exact(3)
            .map(|row| truth(row[1], row[2]))
            .collect();
        let fit = regress_conditional(&features, 3, &targets, 1, 0.0).unwrap();
        for row in features.chunks_exact(3) {
            let pred = fit.predict(row)[0];
            assert!((pred - truth(row[1], row[2])).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_column_flags_and_matches_svd_oracle() {
        // Feature matrix with an exactly duplicated column.
        let rows = [
            [1.0, 2.0, 2.0],
            [1.0, -1.0, -1.0],
            [1.0, 0.5, 0.5],
            [1.0, 3.0, 3.0],
        ];
        let features: Vec<f64> = rows.iter().flatten().cloned().collect();
        let targets: Vec<f64> = rows.iter().map(|r| 1.0 + 4.0 * r[1]).collect();
        let fit = regress_conditional(&features, 3, &targets, 1, 0.0).unwrap();
        assert!(fit.is_rank_deficient());

        // Independent oracle: minimal-norm solution via nalgebra's SVD.
        let x = nalgebra::DMatrix::from_row_slice(4, 3, &features);
        let y = nalgebra::DVector::from_column_slice(&targets);
        let svd = x.svd(true, true);
        let oracle = svd.solve(&y, 1e-12).unwrap();
        for j in 0..3 {
            assert!(
                (fit.coefficients()[j] - oracle[j]).abs() < 1e-8,
                "coefficient {j}: {} vs oracle {}",
                fit.coefficients()[j],
                oracle[j]
            );
        }
        // Predictions agree on the training rows too.
        for (row, want) in rows.iter().zip(&targets) {
            assert!((fit.predict(row)[0] - want).abs() < 1e-8);
        }
    }

    #[test]
    fn multi_target_fit_runs_column_wise() {
        let features: Vec<f64> = vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let targets: Vec<f64> = features
            .chunks_exact(2)
            .flat_map(|row| [row[1] * 2.0, 1.0 - row[1]])
            .collect();
        let fit = regress_conditional(&features, 2, &targets, 2, 0.0).unwrap();
        let pred = fit.predict(&[1.0, 5.0]);
        assert!((pred[0] - 10.0).abs() < 1e-9);
        assert!((pred[1] + 4.0).abs() < 1e-9);
    }

    #[test]
    fn input_validation() {
        assert!(regress_conditional(&[1.0, 2.0], 1, &[1.0, 2.0], 1, 0.0).is_ok());
        // Fewer samples than features.
        assert!(regress_conditional(&[1.0, 2.0], 2, &[1.0], 1, 0.0).is_err());
        // Ragged matrices.
        assert!(regress_conditional(&[1.0, 2.0, 3.0], 2, &[1.0], 1, 0.0).is_err());
        // Non-finite input.
        assert!(regress_conditional(&[1.0, f64::NAN], 1, &[1.0, 1.0], 1, 0.0).is_err());
    }
}
