//! Optimal rectangular linear assignment (shortest augmenting paths with
//! potentials).

use crate::numeric::Matrix;

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Returns, for each row, the column it is assigned to. Every row is assigned
/// when `rows <= cols`; otherwise every column is.
pub fn solve_min(cost: &Matrix) -> Vec<Option<usize>> {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return vec![None; r];
    }
    if r <= c {
        solve_wide(r, c, |i, j| cost.get(i, j))
    } else {
        let by_col = solve_wide(c, r, |i, j| cost.get(j, i));
        let mut out = vec![None; r];
        for (j, row) in by_col.into_iter().enumerate() {
            if let Some(i) = row {
                out[i] = Some(j);
            }
        }
        out
    }
}

/// Maximum-score assignment; same shape contract as [`solve_min`].
pub fn solve_max(score: &Matrix) -> Vec<Option<usize>> {
    solve_min(&score.map(|v| -v))
}

/// Assigned `(row, col)` pairs of a maximum-score assignment.
pub fn max_pairs(score: &Matrix) -> Vec<(usize, usize)> {
    solve_max(score)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect()
}

// Requires n <= m. Indices are 1-based internally; 0 is the virtual root.
fn solve_wide(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total(cost: &Matrix, a: &[Option<usize>]) -> f64 {
        a.iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost.get(i, j)))
            .sum()
    }

    // Minimum over all injections of the smaller side into the larger.
    fn brute_min(cost: &Matrix) -> f64 {
        fn rec(cost: &Matrix, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == cost.rows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.cols() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost.get(i, j) + rec(cost, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        if cost.rows() <= cost.cols() {
            rec(cost, 0, &mut vec![false; cost.cols()])
        } else {
            let t = cost.transpose();
            rec(&t, 0, &mut vec![false; t.cols()])
        }
    }

    #[test]
    fn known_square_case() {
        let c = Matrix::from_rows(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]);
        assert_eq!(solve_min(&c), vec![Some(1), Some(0), Some(2)]);
    }

    #[test]
    fn empty_inputs() {
        assert!(solve_min(&Matrix::zeros(0, 3)).is_empty());
        assert_eq!(solve_min(&Matrix::zeros(2, 0)), vec![None, None]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..r * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let cost = Matrix::new(r, c, data).unwrap();
            let a = solve_min(&cost);
            let cols: Vec<usize> = a.iter().flatten().copied().collect();
            let mut dedup = cols.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), cols.len());
            prop_assert_eq!(cols.len(), r.min(c));
            prop_assert!((total(&cost, &a) - brute_min(&cost)).abs() < 1e-9);
        }
    }
}
