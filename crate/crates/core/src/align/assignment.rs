//! Exact minimum-cost assignment on a square cost matrix (shortest
//! augmenting paths with row/column potentials, O(n^3)).

use ndarray::ArrayView2;

use crate::error::{shape, Result};

/// Optimal assignment: `cols[i]` is the column matched to row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub cols: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching of rows to columns. Columns are scanned in
/// increasing order with strict comparisons, so exact ties resolve towards
/// lower indices.
pub fn solve_assignment(cost: ArrayView2<'_, f64>) -> Result<Assignment> {
    let (n, m) = cost.dim();
    if n != m {
        return shape(format!("assignment needs a square matrix, got {n}x{m}"));
    }
    if let Some(p) = cost.iter().position(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite { what: "cost matrix", index: p });
    }
    if n == 0 {
        return Ok(Assignment { cols: Vec::new(), cost: 0.0 });
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[row_of[j] - 1] = j - 1;
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok(Assignment { cols, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn brute_force(cost: &Array2<f64>) -> f64 {
        fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.nrows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, acc + cost[[row, j]], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
        best
    }

    #[test]
    fn two_by_two_base_case() {
        let a = solve_assignment(array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap();
        assert_eq!(a.cols, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn anti_diagonal() {
        let a = solve_assignment(array![[5.0, 1.0, 9.0], [1.0, 9.0, 9.0], [9.0, 9.0, 1.0]].view()).unwrap();
        assert_eq!(a.cols, vec![1, 0, 2]);
        assert_eq!(a.cost, 3.0);
    }

    #[test]
    fn all_ties_give_identity() {
        let a = solve_assignment(Array2::zeros((6, 6)).view()).unwrap();
        assert_eq!(a.cols, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_rectangular_and_non_finite() {
        assert!(solve_assignment(Array2::zeros((2, 3)).view()).is_err());
        assert!(solve_assignment(array![[f64::NAN]].view()).is_err());
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(n in 1usize..=7, seed in any::<u64>()) {
            use rand::Rng;
            let mut r = crate::rng::stream(seed, &[]);
            let cost = Array2::from_shape_simple_fn((n, n), || r.random_range(-5.0..5.0));
            let a = solve_assignment(cost.view()).unwrap();
            let mut seen = a.cols.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!((a.cost - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
