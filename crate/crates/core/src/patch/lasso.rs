//! Lasso `min 1/2 ||b - A a||^2 + lambda ||a||_1` by the LARS homotopy,
//! followed by coordinate-descent polishing when the path ends early.

use nalgebra::{DMatrix, DVector};

use super::BlockSparseCode;
use crate::error::{Error, Result};
use crate::volume::{dot, norm_sq};

/// Optimality tolerance on the subgradient conditions.
pub const KKT_TOL: f64 = 1e-6;

/// Largest violation of the lasso optimality conditions at `alpha`:
/// `|g_i| <= lambda` where `alpha_i = 0`, `g_i = lambda sign(alpha_i)`
/// elsewhere, with `g = A^T (b - A alpha)`.
pub fn lasso_kkt_violation(a: &DMatrix<f64>, b: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    let r = residual(a, b, alpha);
    (0..a.ncols())
        .map(|j| {
            let g = dot(a.column(j).as_slice(), &r);
            if alpha[j] == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g - lambda * alpha[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn residual(a: &DMatrix<f64>, b: &[f64], alpha: &[f64]) -> Vec<f64> {
    let mut r = b.to_vec();
    for (j, &x) in alpha.iter().enumerate() {
        if x != 0.0 {
            for (rv, av) in r.iter_mut().zip(a.column(j).iter()) {
                *rv -= x * av;
            }
        }
    }
    r
}

enum Event {
    Stop,
    Join(usize),
    Drop(usize),
}

/// Follows the regularization path from `lambda = ||A^T b||_inf` down to
/// `lambda`. Returns `false` if it had to stop early on a singular active set.
fn lars(a: &DMatrix<f64>, b: &[f64], lambda: f64, beta: &mut [f64]) -> bool {
    let q = a.ncols();
    let mut c: Vec<f64> = (0..q).map(|j| dot(a.column(j).as_slice(), b)).collect();
    let (mut first, mut cmax) = (0, 0.0);
    for (j, v) in c.iter().enumerate() {
        if v.abs() > cmax {
            cmax = v.abs();
            first = j;
        }
    }
    if cmax <= lambda {
        return true;
    }
    let mut active = vec![first];
    let mut in_active = vec![false; q];
    in_active[first] = true;
    // Gram rows of the active set, in active order
    let mut gram: Vec<Vec<f64>> = vec![vec![norm_sq(a.column(first).as_slice())]];
    let mut level = cmax;
    let mut just_dropped = None;
    let mut av = vec![0.0; q];
    let tiny = 1e-12 * cmax;

    for _ in 0..8 * (q + a.nrows()) {
        let k = active.len();
        let g = DMatrix::from_fn(k, k, |i, j| gram[i][j]);
        let s = DVector::from_iterator(k, active.iter().map(|&j| c[j].signum()));
        let Some(chol) = g.cholesky() else { return false };
        let w = chol.solve(&s);
        if w.iter().any(|v| !v.is_finite()) {
            return false;
        }
        // u = A_act w; av = A^T u
        let mut u = vec![0.0; a.nrows()];
        for (&j, &wj) in active.iter().zip(w.iter()) {
            for (uv, x) in u.iter_mut().zip(a.column(j).iter()) {
                *uv += wj * x;
            }
        }
        for (j, avj) in av.iter_mut().enumerate() {
            *avj = dot(a.column(j).as_slice(), &u);
        }

        let mut step = level - lambda;
        let mut event = Event::Stop;
        for j in 0..q {
            if in_active[j] || Some(j) == just_dropped {
                continue;
            }
            for t in [(level - c[j]) / (1.0 - av[j]), (level + c[j]) / (1.0 + av[j])] {
                if t > tiny && t < step {
                    step = t;
                    event = Event::Join(j);
                }
            }
        }
        for (pos, &j) in active.iter().enumerate() {
            let t = -beta[j] / w[pos];
            if t > tiny && t < step {
                step = t;
                event = Event::Drop(pos);
            }
        }

        for (&j, &wj) in active.iter().zip(w.iter()) {
            beta[j] += step * wj;
        }
        for (cj, avj) in c.iter_mut().zip(&av) {
            *cj -= step * avj;
        }
        level -= step;
        just_dropped = None;

        match event {
            Event::Stop => return true,
            Event::Join(j) => {
                let row: Vec<f64> = active
                    .iter()
                    .map(|&i| dot(a.column(i).as_slice(), a.column(j).as_slice()))
                    .collect();
                for (r, v) in gram.iter_mut().zip(&row) {
                    r.push(*v);
                }
                let mut new_row = row;
                new_row.push(norm_sq(a.column(j).as_slice()));
                gram.push(new_row);
                active.push(j);
                in_active[j] = true;
            }
            Event::Drop(pos) => {
                let j = active.remove(pos);
                beta[j] = 0.0;
                in_active[j] = false;
                gram.remove(pos);
                for r in gram.iter_mut() {
                    r.remove(pos);
                }
                just_dropped = Some(j);
            }
        }
    }
    false
}

/// Cyclic coordinate descent from `beta` until the optimality conditions
/// hold to [`KKT_TOL`].
fn coordinate_descent(a: &DMatrix<f64>, b: &[f64], lambda: f64, beta: &mut [f64]) {
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
    let mut r = residual(a, b, beta);
    for sweep in 0..100_000 {
        for j in 0..beta.len() {
            if norms[j] == 0.0 {
                continue;
            }
            let col = a.column(j);
            let rho = dot(col.as_slice(), &r) + norms[j] * beta[j];
            let new = rho.signum() * (rho.abs() - lambda).max(0.0) / norms[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for (rv, x) in r.iter_mut().zip(col.iter()) {
                    *rv -= delta * x;
                }
                beta[j] = new;
            }
        }
        if sweep % 10 == 9 && lasso_kkt_violation(a, b, beta, lambda) <= 0.1 * KKT_TOL {
            return;
        }
    }
}

/// Solves the lasso to [`KKT_TOL`] on the optimality conditions.
pub fn lasso_solve(a: &DMatrix<f64>, b: &[f64], lambda: f64) -> Result<BlockSparseCode> {
    if b.len() != a.nrows() {
        return Err(Error::param(format!(
            "right-hand side has length {}, matrix has {} rows",
            b.len(),
            a.nrows()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::param("lasso penalty must be nonnegative"));
    }
    let mut beta = vec![0.0; a.ncols()];
    let finished = lars(a, b, lambda, &mut beta);
    if !finished || lasso_kkt_violation(a, b, &beta, lambda) > 0.5 * KKT_TOL {
        coordinate_descent(a, b, lambda, &mut beta);
    }
    Ok(BlockSparseCode { coeffs: beta })
}
