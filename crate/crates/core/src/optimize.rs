//! Shared numerical machinery: monotone gradient descent with backtracking,
//! an ISTA solver for the L1-sparse surrogate fit, and finite-difference
//! gradient checking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            max_iters: 500,
            rel_tol: 1e-8,
            armijo_c: 1e-4,
            backtrack: 0.5,
        }
    }
}

/// L1-sparse linear approximation of a second-layer classifier; one `alpha`
/// row per output dimension, bias coefficient last and unpenalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub alpha: DMatrix<f64>,
    pub beta: f64,
    pub target_task: usize,
}

impl SurrogateModel {
    /// A * x for a design row x (bias entry included by the caller).
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.alpha * x
    }
}

/// Unconstrained minimization by gradient descent with an Armijo
/// backtracking line search. The trial step uses the Barzilai-Borwein
/// estimate from the previous accepted step, so every accepted step still
/// satisfies the Armijo condition and the objective trace is monotone.
pub fn minimize<F, G>(
    objective: F,
    gradient: G,
    x0: &DVector<f64>,
    config: &DescentConfig,
) -> Result<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut fx = objective(&x);
    if !fx.is_finite() {
        return Err(Error::Numeric("objective not finite at x0".into()));
    }
    let mut g = gradient(&x);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gradient not finite at x0".into()));
    }
    let mut trial = 1.0 / g.norm().max(1.0);

    for iter in 0..config.max_iters {
        let g_sq = g.norm_squared();
        if g_sq == 0.0 {
            break;
        }
        let mut t = trial;
        let mut accepted = None;
        for _ in 0..80 {
            let cand = &x - t * &g;
            let f_cand = objective(&cand);
            if !f_cand.is_finite() {
                t *= config.backtrack;
                continue;
            }
            if f_cand <= fx - config.armijo_c * t * g_sq {
                accepted = Some((cand, f_cand));
                break;
            }
            t *= config.backtrack;
        }
        let Some((x_new, f_new)) = accepted else {
            // no step satisfies Armijo at representable sizes; treat as converged
            break;
        };
        let g_new = gradient(&x_new);
        if g_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient not finite at iterate {iter}"
            )));
        }
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        trial = if sy > 0.0 {
            (s.norm_squared() / sy).clamp(1e-12, 1e12)
        } else {
            t / config.backtrack
        };

        let progress = fx - f_new;
        x = x_new;
        g = g_new;
        let converged = progress <= config.rel_tol * fx.abs().max(1.0);
        fx = f_new;
        if converged {
            break;
        }
    }
    Ok((x, fx))
}

/// Elementwise proximal operator of t * |.|: sign(v) * max(|v| - t, 0).
pub fn soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v.map(|x| x.signum() * (x.abs() - t).max(0.0))
}

/// Lasso objective: sum of squared residuals plus beta times the L1 norm of
/// all non-bias coefficients (the last design column is the bias).
pub fn lasso_objective(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: f64,
) -> f64 {
    let resid = design * alpha.transpose() - targets;
    let l1: f64 = (0..alpha.nrows())
        .map(|r| {
            (0..alpha.ncols() - 1)
                .map(|c| alpha[(r, c)].abs())
                .sum::<f64>()
        })
        .sum();
    resid.norm_squared() + beta * l1
}

/// Max KKT subgradient residual for the lasso solution: for nonzero
/// coefficients |g + beta*sign(a)|, for zero coefficients max(|g| - beta, 0),
/// bias coordinate |g| directly; g is the smooth-part gradient.
pub fn lasso_kkt_residual(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: f64,
) -> f64 {
    let grad = (design * alpha.transpose() - targets).transpose() * design * 2.0;
    let bias = alpha.ncols() - 1;
    let mut worst: f64 = 0.0;
    for r in 0..alpha.nrows() {
        for c in 0..alpha.ncols() {
            let g = grad[(r, c)];
            let res = if c == bias {
                g.abs()
            } else if alpha[(r, c)] != 0.0 {
                (g + beta * alpha[(r, c)].signum()).abs()
            } else {
                (g.abs() - beta).max(0.0)
            };
            worst = worst.max(res);
        }
    }
    worst
}

/// Fit the L1-sparse linear surrogate by proximal gradient (ISTA) with
/// backtracking on the smooth part. `design` rows are [features; latents; 1];
/// `targets` has one column per output dimension. Runs until the KKT
/// subgradient residual is at most 1e-5.
pub fn lasso_fit(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    beta: f64,
) -> Result<SurrogateModel> {
    if design.nrows() == 0 {
        return Err(Error::EmptyFit("lasso_fit called with zero rows".into()));
    }
    if design.nrows() != targets.nrows() {
        return Err(Error::Contract(format!(
            "design has {} rows but targets has {}",
            design.nrows(),
            targets.nrows()
        )));
    }
    if design.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in lasso inputs".into()));
    }
    if beta < 0.0 {
        return Err(Error::Contract("beta must be nonnegative".into()));
    }
    let n_feat = design.ncols();
    let out_dim = targets.ncols();
    let bias = n_feat - 1;
    let mut alpha = DMatrix::zeros(out_dim, n_feat);

    // per-output-column ISTA; columns are independent problems
    let gram = design.transpose() * design;
    for o in 0..out_dim {
        let y = targets.column(o).into_owned();
        let xty = design.transpose() * &y;
        let smooth = |a: &DVector<f64>| (design * a - &y).norm_squared();
        let smooth_grad = |a: &DVector<f64>| (&gram * a - &xty) * 2.0;
        let prox = |v: DVector<f64>, t: f64| {
            let mut out = v.map(|x| x.signum() * (x.abs() - t * beta).max(0.0));
            out[bias] = v[bias]; // bias unpenalized
            out
        };
        let kkt = |a: &DVector<f64>| {
            let g = smooth_grad(a);
            let mut worst: f64 = g[bias].abs();
            for c in 0..bias {
                let r = if a[c] != 0.0 {
                    (g[c] + beta * a[c].signum()).abs()
                } else {
                    (g[c].abs() - beta).max(0.0)
                };
                worst = worst.max(r);
            }
            worst
        };

        let mut a = DVector::zeros(n_feat);
        let mut fa = smooth(&a);
        let mut step = 1.0 / (2.0 * gram.trace()).max(1e-12);
        for _ in 0..200_000 {
            if kkt(&a) <= 1e-5 {
                break;
            }
            let g = smooth_grad(&a);
            // backtrack on the quadratic upper bound of the smooth part
            let mut t = step * 4.0;
            loop {
                let cand = prox(&a - t * &g, t);
                let diff = &cand - &a;
                let f_cand = smooth(&cand);
                if f_cand <= fa + g.dot(&diff) + diff.norm_squared() / (2.0 * t) || t < 1e-18 {
                    a = cand;
                    fa = f_cand;
                    step = t;
                    break;
                }
                t *= 0.5;
            }
        }
        let obj = |v: &DVector<f64>| {
            smooth(v)
                + beta
                    * (0..n_feat)
                        .filter(|&c| c != bias)
                        .map(|c| v[c].abs())
                        .sum::<f64>()
        };
        // the all-zero candidate (bias at its unconstrained optimum) wins
        // exactly at and above the null-solution threshold
        {
            let denom = design.column(bias).norm_squared().max(1e-300);
            let mut zero_cand = DVector::zeros(n_feat);
            zero_cand[bias] = design.column(bias).dot(&y) / denom;
            if obj(&zero_cand) <= obj(&a) + 1e-12 {
                a = zero_cand;
            }
        }
        // polish on the detected support: with signs fixed, the optimum
        // solves a linear system exactly; accept it only when signs are
        // preserved (always, when beta is zero) and the objective does not
        // increase
        let support: Vec<usize> = (0..n_feat).filter(|&c| a[c] != 0.0 || c == bias).collect();
        if !support.is_empty() {
            let xs = DMatrix::from_fn(design.nrows(), support.len(), |r, c| {
                design[(r, support[c])]
            });
            let signs = DVector::from_fn(support.len(), |c, _| {
                if support[c] == bias {
                    0.0
                } else {
                    a[support[c]].signum()
                }
            });
            let rhs = xs.transpose() * &y - &signs * (beta / 2.0);
            let gram_s = xs.transpose() * &xs;
            if let Some(sol) = gram_s
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .or_else(|| gram_s.full_piv_lu().solve(&rhs))
            {
                let signs_ok = beta == 0.0
                    || (0..support.len()).all(|c| {
                        support[c] == bias || sol[c].signum() == signs[c] || sol[c] == 0.0
                    });
                if signs_ok {
                    let mut cand = DVector::zeros(n_feat);
                    for (c, &col) in support.iter().enumerate() {
                        cand[col] = sol[c];
                    }
                    if obj(&cand) <= obj(&a) + 1e-12 {
                        a = cand;
                    }
                }
            }
        }
        alpha.row_mut(o).copy_from(&a.transpose());
    }

    Ok(SurrogateModel {
        alpha,
        beta,
        target_task: 0,
    })
}

/// Max relative error between `grad` and central finite differences of `f`:
/// per coordinate |fd - g| / max(1, |g|).
pub fn check_gradient<F, G>(f: F, grad: G, x: &DVector<f64>, h: f64) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract("h must be positive".into()));
    }
    let g = grad(x);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
    }
    Ok(worst)
}
