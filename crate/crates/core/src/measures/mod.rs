//! Empirical measures on R^m and Wasserstein distances between them.
//!
//! Everything the convergence statements of this crate measure goes through
//! this module: equally weighted point clouds, exact transport distances
//! (sorted coupling in 1D, linear assignment in general dimension), an
//! entropic approximation for large clouds, and moment functionals.

mod assignment;
pub mod gaussian;
mod sinkhorn;

pub use assignment::min_cost_assignment;
pub use gaussian::{inverse_normal_cdf, standard_quantile_table, GaussianLaw};

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Largest support size solved by exact assignment in [`wasserstein_2`];
/// larger clouds fall back to the entropic approximation.
pub const ASSIGNMENT_SIZE_CAP: usize = 512;

/// Atom count used when discretizing a continuous reference law.
pub const REFERENCE_QUANTILE_ATOMS: usize = 1 << 14;

/// An equally weighted point cloud in R^m.
#[derive(Debug)]
pub struct EmpiricalMeasure {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    mean: OnceLock<Vec<f64>>,
    mean_sq_norm: OnceLock<f64>,
    sorted_1d: OnceLock<Vec<f64>>,
}

impl Clone for EmpiricalMeasure {
    fn clone(&self) -> Self {
        EmpiricalMeasure {
            points: self.points.clone(),
            n: self.n,
            dim: self.dim,
            mean: OnceLock::new(),
            mean_sq_norm: OnceLock::new(),
            sorted_1d: OnceLock::new(),
        }
    }
}

impl PartialEq for EmpiricalMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.points == other.points
    }
}

impl EmpiricalMeasure {
    /// Build a measure from `n * dim` coordinates in row-major point order.
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("state dimension must be >= 1"));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates do not form a nonempty cloud in dimension {dim}",
                points.len()
            )));
        }
        if !points.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("empirical measure has non-finite coordinates"));
        }
        let n = points.len() / dim;
        Ok(EmpiricalMeasure {
            points,
            n,
            dim,
            mean: OnceLock::new(),
            mean_sq_norm: OnceLock::new(),
            sorted_1d: OnceLock::new(),
        })
    }

    /// The one-atom measure at the origin of R^dim.
    pub fn dirac_origin(dim: usize) -> Self {
        EmpiricalMeasure::new(vec![0.0; dim], dim).expect("origin atom is valid")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Barycenter, cached after the first call.
    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            let mut acc = vec![0.0; self.dim];
            for i in 0..self.n {
                for (a, x) in acc.iter_mut().zip(self.point(i)) {
                    *a += x;
                }
            }
            for a in acc.iter_mut() {
                *a /= self.n as f64;
            }
            acc
        })
    }

    /// `(1/n) sum |x_i|^2`, cached. Equals `W_2^2(mu, delta_0)`.
    pub fn mean_sq_norm(&self) -> f64 {
        *self.mean_sq_norm.get_or_init(|| {
            self.points.iter().map(|x| x * x).sum::<f64>() / self.n as f64
        })
    }

    fn sorted_scalars(&self) -> &[f64] {
        debug_assert_eq!(self.dim, 1);
        self.sorted_1d.get_or_init(|| {
            let mut v = self.points.clone();
            v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            v
        })
    }
}

/// How a distance value was computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceMethod {
    /// Exact sorted coupling, dimension 1 only.
    Exact1d,
    /// Exact linear-assignment solve.
    ExactAssignment,
    /// Entropic approximation with the recorded regularization strength.
    Entropic { epsilon: f64 },
}

/// A Wasserstein distance together with its order and provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult {
    pub value: f64,
    pub order: f64,
    pub method: DistanceMethod,
}

impl DistanceResult {
    /// True when the value is an entropic approximation rather than exact.
    pub fn is_approximate(&self) -> bool {
        matches!(self.method, DistanceMethod::Entropic { .. })
    }
}

/// Exact `W_p` between two scalar clouds of equal size via the sorted
/// coupling, which is optimal in one dimension.
pub fn wasserstein_p_1d(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
) -> Result<DistanceResult> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::invalid("sorted coupling requires dimension 1"));
    }
    if mu.len() != nu.len() {
        return Err(Error::invalid(format!(
            "support sizes differ: {} vs {}",
            mu.len(),
            nu.len()
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("order p must be >= 1, got {p}")));
    }
    let xs = mu.sorted_scalars();
    let ys = nu.sorted_scalars();
    let pth: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum::<f64>()
        / mu.len() as f64;
    Ok(DistanceResult {
        value: pth.powf(1.0 / p),
        order: p,
        method: DistanceMethod::Exact1d,
    })
}

/// Exact `W_p` between two scalar clouds of arbitrary (possibly different)
/// sizes, via the quantile-function representation of the optimal coupling.
/// Both measures stay equally weighted within themselves.
pub fn wasserstein_p_1d_quantile(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
) -> Result<f64> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::invalid("quantile coupling requires dimension 1"));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("order p must be >= 1, got {p}")));
    }
    let xs = mu.sorted_scalars();
    let ys = nu.sorted_scalars();
    let n = xs.len() as f64;
    let m = ys.len() as f64;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut u = 0.0f64;
    let mut acc = 0.0f64;
    while i < xs.len() && j < ys.len() {
        let ui = (i + 1) as f64 / n;
        let uj = (j + 1) as f64 / m;
        let next = ui.min(uj);
        acc += (next - u) * (xs[i] - ys[j]).abs().powf(p);
        u = next;
        if ui <= next {
            i += 1;
        }
        if uj <= next {
            j += 1;
        }
    }
    Ok(acc.powf(1.0 / p))
}

/// Exact `W_p` between a scalar cloud and the quantile discretization of a
/// Gaussian law, without materializing the discretization: the reference
/// quantile function is `mean + sd * table[j]` over the shared standard
/// table.
pub fn wasserstein_p_1d_to_gaussian(
    mu: &EmpiricalMeasure,
    law: GaussianLaw,
    p: f64,
    table: &[f64],
) -> Result<f64> {
    if mu.dim() != 1 {
        return Err(Error::invalid("Gaussian reference coupling requires dimension 1"));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("order p must be >= 1, got {p}")));
    }
    if table.is_empty() {
        return Err(Error::invalid("empty quantile table"));
    }
    let xs = mu.sorted_scalars();
    let sd = law.variance.sqrt();
    let n = xs.len() as f64;
    let m = table.len() as f64;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut u = 0.0f64;
    let mut acc = 0.0f64;
    while i < xs.len() && j < table.len() {
        let ui = (i + 1) as f64 / n;
        let uj = (j + 1) as f64 / m;
        let next = ui.min(uj);
        let y = law.mean + sd * table[j];
        acc += (next - u) * (xs[i] - y).abs().powf(p);
        u = next;
        if ui <= next {
            i += 1;
        }
        if uj <= next {
            j += 1;
        }
    }
    Ok(acc.powf(1.0 / p))
}

fn squared_cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let n = mu.len();
    let d = mu.dim();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let x = mu.point(i);
        for j in 0..n {
            let y = nu.point(j);
            let mut acc = 0.0;
            for c in 0..d {
                let diff = x[c] - y[c];
                acc += diff * diff;
            }
            cost[i * n + j] = acc;
        }
    }
    cost
}

fn check_equal_clouds(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::invalid(format!(
            "dimensions differ: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.len() != nu.len() {
        return Err(Error::invalid(format!(
            "uniform-weight assignment requires equal support sizes, got {} vs {}",
            mu.len(),
            nu.len()
        )));
    }
    Ok(())
}

/// Exact `W_2` in any dimension by a linear-assignment solve over the
/// squared-distance matrix. O(n^3): intended for moderate support sizes.
pub fn wasserstein_2_assignment(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<DistanceResult> {
    check_equal_clouds(mu, nu)?;
    let n = mu.len();
    let cost = squared_cost_matrix(mu, nu);
    let (_, total) = min_cost_assignment(&cost, n);
    Ok(DistanceResult {
        // Guard tiny negative totals from potential cancellation.
        value: (total / n as f64).max(0.0).sqrt(),
        order: 2.0,
        method: DistanceMethod::ExactAssignment,
    })
}

/// The crate's default `W_2`: sorted coupling in dimension 1, exact
/// assignment up to [`ASSIGNMENT_SIZE_CAP`] atoms, entropic approximation
/// (flagged in the result) beyond that.
pub fn wasserstein_2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<DistanceResult> {
    check_equal_clouds(mu, nu)?;
    if mu.dim() == 1 {
        return wasserstein_p_1d(mu, nu, 2.0);
    }
    if mu.len() <= ASSIGNMENT_SIZE_CAP {
        return wasserstein_2_assignment(mu, nu);
    }
    let cost = squared_cost_matrix(mu, nu);
    // The entropic plan carries total mass 1, so the transport cost is
    // already the averaged squared displacement.
    let (total, epsilon) = sinkhorn::entropic_transport_cost(&cost, mu.len());
    Ok(DistanceResult {
        value: total.max(0.0).sqrt(),
        order: 2.0,
        method: DistanceMethod::Entropic { epsilon },
    })
}

/// `W_p(mu, delta_0) = ((1/n) sum |x_i|^p)^(1/p)`.
pub fn moment_distance_to_dirac(mu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("order p must be >= 1, got {p}")));
    }
    let d = mu.dim();
    let pth = (0..mu.len())
        .map(|i| {
            let norm_sq: f64 = mu.point(i).iter().map(|x| x * x).sum();
            if d == 1 {
                mu.point(i)[0].abs().powf(p)
            } else {
                norm_sq.sqrt().powf(p)
            }
        })
        .sum::<f64>()
        / mu.len() as f64;
    Ok(pth.powf(1.0 / p))
}

/// Both sides of the identity-coupling bound
/// `W_2^2(emp(x), emp(y)) <= (1/n) sum |x_i - y_i|^2`.
///
/// Index `i` pairs `x_i` with `y_i`. The first component is computed by an
/// exact method, so the inequality holds for every input, not statistically.
pub fn coupling_upper_bound(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(f64, f64)> {
    check_equal_clouds(mu, nu)?;
    let w2 = if mu.dim() == 1 {
        wasserstein_p_1d(mu, nu, 2.0)?
    } else {
        wasserstein_2_assignment(mu, nu)?
    };
    let n = mu.len();
    let d = mu.dim();
    let paired = (0..n)
        .map(|i| {
            let x = mu.point(i);
            let y = nu.point(i);
            (0..d).map(|c| (x[c] - y[c]) * (x[c] - y[c])).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok((w2.value * w2.value, paired))
}
