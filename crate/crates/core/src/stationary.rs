//! Steady-state distribution of a finite row-stochastic matrix.
//!
//! The balance equations `(Pᵀ − I)·p = 0` have rank `m − 1` for a chain with a
//! unique stationary law, so the last equation is swapped for the
//! normalization row `Σ p_i = 1` and the resulting square system is solved by
//! Gaussian elimination with partial pivoting. A vanishing pivot means the
//! substituted system is singular, i.e. the chain has several closed classes.

use crate::error::{Error, Result};

/// Pivots below this magnitude are treated as zero.
const PIVOT_TOLERANCE: f64 = 1e-11;

/// Returns the unique stationary distribution of `p`, or [`Error::NonErgodic`]
/// when the chain admits more than one.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = p.len();
    if m == 0 {
        return Err(Error::InvalidParameter("empty transition matrix".into()));
    }
    for row in p {
        if row.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: row.len(),
            });
        }
    }

    // a[i][j] = P[j][i] - δ_ij, last row replaced by ones.
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| p[j][i] - if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    a[m - 1].iter_mut().for_each(|x| *x = 1.0);
    let mut b = vec![0.0; m];
    b[m - 1] = 1.0;

    let mut x = solve_in_place(&mut a, &mut b).ok_or(Error::NonErgodic)?;

    // Round-off can leave components like -1e-18 on transient states.
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    let total: f64 = x.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NonErgodic);
    }
    x.iter_mut().for_each(|v| *v /= total);
    Ok(x)
}

/// Max-norm of `(Pᵀ − I)·x`.
pub fn stationarity_residual(p: &[Vec<f64>], x: &[f64]) -> f64 {
    let m = p.len();
    (0..m)
        .map(|j| {
            let flow: f64 = (0..m).map(|i| p[i][j] * x[i]).sum();
            (flow - x[j]).abs()
        })
        .fold(0.0, f64::max)
}

fn solve_in_place(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .expect("non-empty pivot range");
        if a[pivot_row][col].abs() < PIVOT_TOLERANCE {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            let (upper, lower) = a.split_at_mut(row);
            for (dst, src) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *dst -= factor * src;
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}
