//! Exact linear assignment by shortest augmenting paths.
//!
//! Dense Hungarian algorithm with row/column potentials, O(n^3). Costs are
//! plain `f64`; the caller guarantees they are finite.

/// Minimize `sum_i cost[i][sigma(i)]` over permutations `sigma`.
///
/// `cost` is row-major `n x n`. Returns the optimal assignment (row -> column)
/// and its total cost.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    assert!(n >= 1);

    // 1-indexed with column 0 as the sentinel of the augmenting path search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_to_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_to_row[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_to_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_to_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_to_row[j0] == 0 {
                break;
            }
        }
        // Unwind the alternating path.
        loop {
            let j1 = way[j0];
            col_to_row[j0] = col_to_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        let row = col_to_row[j];
        assignment[row - 1] = j - 1;
        total += cost[(row - 1) * n + (j - 1)];
    }
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        // Exhaustive minimum over all n! permutations.
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if row == n {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for col in 0..n {
                if !used[col] {
                    used[col] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + col], best);
                    used[col] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_small_matrices() {
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..200 {
            let n = 1 + trial % 6;
            let cost: Vec<f64> = (0..n * n).map(|_| next() * 10.0 - 3.0).collect();
            let (assignment, total) = min_cost_assignment(&cost, n);
            // The assignment must be a permutation.
            let mut seen = vec![false; n];
            for &c in &assignment {
                assert!(!seen[c]);
                seen[c] = true;
            }
            let expected = brute_force(&cost, n);
            assert!(
                (total - expected).abs() < 1e-9,
                "n = {n}: got {total}, brute force {expected}"
            );
        }
    }

    #[test]
    fn handles_ties() {
        let cost = vec![1.0, 1.0, 1.0, 1.0];
        let (_, total) = min_cost_assignment(&cost, 2);
        assert_eq!(total, 2.0);
    }

    #[test]
    fn identity_is_optimal_on_diagonal_zeros() {
        let n = 5;
        let mut cost = vec![1.0; n * n];
        for i in 0..n {
            cost[i * n + i] = 0.0;
        }
        let (assignment, total) = min_cost_assignment(&cost, n);
        assert_eq!(total, 0.0);
        for (i, &j) in assignment.iter().enumerate() {
            assert_eq!(i, j);
        }
    }
}
