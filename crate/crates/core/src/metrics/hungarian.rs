//! Minimum-cost linear assignment via shortest augmenting paths with
//! potentials (Jonker-Volgenant style, O(n²m)). Rectangular matrices are
//! handled by solving the transposed problem when rows exceed columns, so
//! the larger side is only partially assigned.

use crate::error::{Error, Result};

/// A minimum-cost partial assignment of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[r]` is the column assigned to row `r`, if any.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Solves `min sum cost[r][assign(r)]` over injective assignments covering
/// the smaller side of the matrix.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Assignment {
            row_to_col: vec![],
            total_cost: 0.0,
        });
    }
    let cols = cost[0].len();
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Data(format!(
                "ragged cost matrix: row {r} has {} columns, expected {cols}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite cost in row {r}")));
        }
    }
    if cols == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; rows],
            total_cost: 0.0,
        });
    }
    if rows <= cols {
        let row_to_col = solve(cost, rows, cols);
        let total_cost = row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost[r][c]))
            .sum();
        Ok(Assignment {
            row_to_col,
            total_cost,
        })
    } else {
        let transposed: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let col_to_row = solve(&transposed, cols, rows);
        let mut row_to_col = vec![None; rows];
        for (c, r) in col_to_row.iter().enumerate() {
            if let Some(r) = r {
                row_to_col[*r] = Some(c);
            }
        }
        let total_cost = row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost[r][c]))
            .sum();
        Ok(Assignment {
            row_to_col,
            total_cost,
        })
    }
}

/// Core solver; requires `rows <= cols`. Column `cols` is the virtual start
/// column of each augmenting search.
fn solve(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; rows];
    let mut v = vec![0.0f64; cols + 1];
    // col_row[j] = row currently assigned to column j.
    let mut col_row = vec![NONE; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for r in 0..rows {
        col_row[cols] = r;
        let mut j0 = cols;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 0..cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0][j] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == NONE {
                break;
            }
        }
        // Augment along the stored path.
        while j0 != cols {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
        }
    }

    let mut row_to_col = vec![None; rows];
    for (j, &r) in col_row.iter().enumerate().take(cols) {
        if r != NONE {
            row_to_col[r] = Some(j);
        }
    }
    row_to_col
}
