//! Kuhn-Munkres (Hungarian) solver for square assignment problems.
//!
//! Shortest-augmenting-path formulation with row/column potentials, O(n^3).
//! Rows are inserted in index order and the scan over columns keeps the first
//! (lowest-index) minimum, so the returned permutation is a deterministic
//! function of the matrix.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Optimal permutation of a square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LsapSolution {
    /// `row_to_col[i]` is the column assigned to row `i`.
    pub row_to_col: Vec<usize>,
    /// Sum of the selected entries, accumulated in row order.
    pub total: f64,
}

pub fn solve_lsap(costs: &DMatrix<f64>) -> Result<LsapSolution> {
    let n = costs.nrows();
    if costs.ncols() != n {
        return Err(Error::Contract(format!(
            "cost matrix must be square, got {}x{}",
            n,
            costs.ncols()
        )));
    }
    if let Some(bad) = costs.iter().find(|c| !c.is_finite()) {
        return Err(Error::Contract(format!("non-finite cost entry {bad}")));
    }
    if n == 0 {
        return Ok(LsapSolution {
            row_to_col: Vec::new(),
            total: 0.0,
        });
    }

    // 1-based bookkeeping; column 0 is the virtual source of each augmentation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = costs[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        // Augment along the alternating path back to the source.
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[(i, j)])
        .sum();
    Ok(LsapSolution { row_to_col, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all permutations (Heap's algorithm).
    fn brute_force_min(costs: &DMatrix<f64>) -> f64 {
        let n = costs.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let eval = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| costs[(i, j)]).sum() };
        let mut best = eval(&perm);
        let mut c = vec![0usize; n];
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(eval(&perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn identity_dominant() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 9.0, 9.0, 1.0]);
        let s = solve_lsap(&m).unwrap();
        assert_eq!(s.row_to_col, vec![0, 1]);
        assert_eq!(s.total, 2.0);
    }

    #[test]
    fn anti_diagonal_optimum() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 2.0, 3.0]);
        let s = solve_lsap(&m).unwrap();
        assert_eq!(s.row_to_col, vec![1, 0]);
        assert_eq!(s.total, 3.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            solve_lsap(&DMatrix::zeros(2, 3)),
            Err(Error::Contract(_))
        ));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(solve_lsap(&m), Err(Error::Contract(_))));
        let m = DMatrix::from_row_slice(1, 1, &[f64::INFINITY]);
        assert!(solve_lsap(&m).is_err());
    }

    #[test]
    fn empty_matrix() {
        let s = solve_lsap(&DMatrix::zeros(0, 0)).unwrap();
        assert!(s.row_to_col.is_empty());
    }

    #[test]
    fn ties_resolve_deterministically() {
        let m = DMatrix::from_element(4, 4, 1.0);
        let a = solve_lsap(&m).unwrap();
        let b = solve_lsap(&m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, 4.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..=7, seed in prop::collection::vec(0.0..100.0f64, 49)) {
            let m = DMatrix::from_fn(n, n, |i, j| seed[i * 7 + j]);
            let s = solve_lsap(&m).unwrap();
            prop_assert_eq!(s.total, brute_force_min(&m));
        }

        #[test]
        fn integer_costs_with_ties_match_brute_force(n in 1usize..=7, seed in prop::collection::vec(0u8..5, 49)) {
            let m = DMatrix::from_fn(n, n, |i, j| f64::from(seed[i * 7 + j]));
            let s = solve_lsap(&m).unwrap();
            prop_assert_eq!(s.total, brute_force_min(&m));
            let mut cols = s.row_to_col.clone();
            cols.sort_unstable();
            prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
        }
    }
}
