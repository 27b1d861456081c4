//! Optimal bipartite assignment (Hungarian / shortest augmenting path).
//!
//! Solves `min Σ cost[i][assign(i)]` over one-to-one assignments covering
//! `min(n, m)` pairs. Ties between equally cheap assignments are broken
//! toward the lexicographically smallest assignment vector so matching is
//! reproducible across runs and platforms.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of an assignment between predictions (rows) and targets (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(row, column)` pairs, sorted by row; every column of a feasible
    /// problem appears exactly once when `rows >= columns`.
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
    /// Rows left without a column ("no object" predictions downstream).
    pub unmatched_predictions: Vec<usize>,
}

/// Globally optimal assignment for a rectangular cost matrix.
pub fn hungarian(cost: &Tensor) -> Result<MatchResult> {
    if cost.rank() != 2 {
        return Err(Error::invalid("hungarian", format!("cost must be rank 2, got {:?}", cost.shape())));
    }
    if cost.data().iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("hungarian", "NaN in cost matrix"));
    }
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    let pairs = n.min(m);
    if pairs == 0 {
        return Ok(MatchResult {
            assignment: vec![],
            total_cost: 0.0,
            unmatched_predictions: (0..n).collect(),
        });
    }

    let optimum = solve_any(cost.data(), n, m);
    let tol = 1e-9 * optimum.abs().max(1.0);

    // Canonicalize: walk rows in order and pin the smallest column (or skip,
    // when fewer columns than rows) that keeps the total optimal.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(pairs);
    let mut used_cols = vec![false; m];
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let remaining_rows = n - row - 1;
        let need = pairs - fixed.len();
        let mut chosen: Option<usize> = None;
        for col in 0..m {
            if used_cols[col] {
                continue;
            }
            let sub = best_subproblem(cost, row + 1, n, &used_cols, Some(col), need - 1);
            if let Some(rest) = sub {
                if fixed_cost + cost.at2(row, col) + rest <= optimum + tol {
                    chosen = Some(col);
                    break;
                }
            }
        }
        match chosen {
            Some(col) => {
                used_cols[col] = true;
                fixed_cost += cost.at2(row, col);
                fixed.push((row, col));
            }
            None => {
                // Row stays unmatched; only possible when m < n.
                debug_assert!(remaining_rows >= need);
            }
        }
        if fixed.len() == pairs {
            break;
        }
    }
    debug_assert!((fixed_cost - optimum).abs() <= tol.max(1e-9 * fixed_cost.abs()));

    let matched_rows: Vec<usize> = fixed.iter().map(|&(r, _)| r).collect();
    let unmatched = (0..n).filter(|r| !matched_rows.contains(r)).collect();
    Ok(MatchResult {
        assignment: fixed,
        total_cost: fixed_cost,
        unmatched_predictions: unmatched,
    })
}

/// Minimal cost of assigning rows `row_start..n` to the unused columns,
/// with `col_pin` treated as already taken; `need` pairs must be formed.
/// Returns `None` when the subproblem cannot supply `need` pairs.
fn best_subproblem(
    cost: &Tensor,
    row_start: usize,
    n: usize,
    used_cols: &[bool],
    col_pin: Option<usize>,
    need: usize,
) -> Option<f64> {
    let m = cost.shape()[1];
    let rows: Vec<usize> = (row_start..n).collect();
    let cols: Vec<usize> = (0..m)
        .filter(|&c| !used_cols[c] && Some(c) != col_pin)
        .collect();
    if rows.len().min(cols.len()) < need {
        return None;
    }
    if need == 0 {
        return Some(0.0);
    }
    let mut sub = vec![0.0; rows.len() * cols.len()];
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            sub[i * cols.len() + j] = cost.at2(r, c);
        }
    }
    Some(solve_any(&sub, rows.len(), cols.len()))
}

/// Minimal total cost over `min(n, m)` pairs, transposing when rows exceed
/// columns so the augmenting-path core always sees `n <= m`.
fn solve_any(cost: &[f64], n: usize, m: usize) -> f64 {
    if n == 0 || m == 0 {
        return 0.0;
    }
    if n <= m {
        solve_rows_le_cols(cost, n, m)
    } else {
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = cost[i * m + j];
            }
        }
        solve_rows_le_cols(&t, m, n)
    }
}

/// Shortest-augmenting-path assignment with dual potentials; `n <= m`.
fn solve_rows_le_cols(cost: &[f64], n: usize, m: usize) -> f64 {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m + 1];
    // col_row[j] = row currently assigned to column j; column m is virtual.
    let mut col_row = vec![NONE; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 0..n {
        col_row[m] = i;
        let mut j0 = m;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 0..m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 * m + j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            debug_assert!(j1 != NONE, "assignment search exhausted the columns");
            for j in 0..=m {
                if used[j] {
                    if col_row[j] != NONE {
                        u[col_row[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == NONE {
                break;
            }
        }
        // Augment along the alternating path back to the virtual column.
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == m {
                break;
            }
        }
    }

    let mut total = 0.0;
    for j in 0..m {
        if col_row[j] != NONE {
            total += cost[col_row[j] * m + j];
        }
    }
    total
}
