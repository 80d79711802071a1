//! Independent reference implementations (oracles) used by the acceptance
//! suite. These deliberately avoid the library's own solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Lasso by cyclic coordinate descent: minimize
/// ||y - X a||^2 + beta * sum_{c != bias_col} |a_c|.
pub fn lasso_coordinate_descent(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: f64,
    bias_col: usize,
    sweeps: usize,
) -> DVector<f64> {
    let n_feat = design.ncols();
    let mut a = DVector::zeros(n_feat);
    let col_sq: Vec<f64> = (0..n_feat)
        .map(|c| design.column(c).norm_squared())
        .collect();
    let mut residual = y.clone(); // y - X a
    for _ in 0..sweeps {
        let mut max_change = 0.0f64;
        for c in 0..n_feat {
            if col_sq[c] == 0.0 {
                continue;
            }
            let old = a[c];
            let rho: f64 = design.column(c).dot(&residual) + col_sq[c] * old;
            let new = if c == bias_col {
                rho / col_sq[c]
            } else {
                rho.signum() * (rho.abs() - beta / 2.0).max(0.0) / col_sq[c]
            };
            if new != old {
                residual -= design.column(c) * (new - old);
                a[c] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        if max_change < 1e-13 {
            break;
        }
    }
    a
}

/// The lasso objective with an unpenalized bias column.
pub fn lasso_objective_value(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    a: &DVector<f64>,
    beta: f64,
    bias_col: usize,
) -> f64 {
    let fit = (design * a - y).norm_squared();
    let l1: f64 = (0..a.len())
        .filter(|&c| c != bias_col)
        .map(|c| a[c].abs())
        .sum();
    fit + beta * l1
}

/// Least squares via SVD (minimum-norm solution for rank-deficient
/// systems), for the beta = 0 comparison.
pub fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    design
        .clone()
        .svd(true, true)
        .solve(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()), 1e-12)
        .expect("least squares solvable")
        .column(0)
        .into_owned()
}

/// Uniform draw in [-1, 1].
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

/// Brute-force minimum of a scalar function over a uniform grid.
pub fn grid_minimum(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let mut best = (lo, f(lo));
    for i in 1..points {
        let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}
