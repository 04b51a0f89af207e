//! Derivative-free quasi-Newton maximization and Laplace approximations
//! used to place the pseudo-priors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::linalg::symmetrize;

#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn step_size(h: f64, x: f64) -> f64 {
    h * x.abs().max(1.0)
}

/// Central-difference gradient.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let hi = step_size(h, x[i]);
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * hi);
    }
    g
}

/// Central-difference Hessian, symmetrized.
pub fn fd_hessian<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let f0 = f(x);
    let steps: Vec<f64> = x.iter().map(|&v| step_size(h, v)).collect();
    let mut hess = DMatrix::zeros(d, d);
    let mut xp = x.clone();
    for i in 0..d {
        let hi = steps[i];
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * hi;
                xp[j] = x[j] + sj * hj;
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// BFGS ascent with finite-difference gradients and a backtracking line
/// search. Stops when the gradient norm falls below `grad_tol` or after
/// `max_iter` iterations.
pub fn maximize<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    x0: &DVector<f64>,
    max_iter: usize,
    grad_tol: f64,
) -> Maximum {
    let d = x0.len();
    let h = 1e-6;
    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut g = fd_gradient(f, &x, h);
    let mut inv = DMatrix::<f64>::identity(d, d);
    let mut iterations = 0;
    let mut converged = false;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Maximum {
            x,
            value: fx,
            iterations,
            converged,
        };
    }
    while iterations < max_iter {
        if g.norm() < grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = &inv * &g;
        if dir.dot(&g) <= 0.0 {
            inv = DMatrix::identity(d, d);
            dir = g.clone();
        }
        if iterations == 1 {
            dir /= g.norm().max(1.0);
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &dir * t;
            let fv = f(&xn);
            if fv.is_finite() && fv >= fx + 1e-4 * t * slope {
                accepted = Some((xn, fv));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            // no ascent step available at this resolution
            converged = g.norm() < grad_tol.sqrt();
            break;
        };
        let gn = fd_gradient(f, &xn, h);
        let s = &xn - &x;
        // ascent on f is descent on −f: y = −(g_new − g)
        let yv = &g - &gn;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(d, d);
            let left = &id - &s * yv.transpose() * rho;
            let right = &id - &yv * s.transpose() * rho;
            inv = &left * &inv * &right + &s * s.transpose() * rho;
        }
        let gain = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        if gain.abs() < 1e-12 * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Maximum {
        x,
        value: fx,
        iterations,
        converged,
    }
}

/// Gaussian approximation `N(x*, (−H)⁻¹)` at the maximizer of `f`.
///
/// Returns `None` when the optimizer ends on a non-finite value or the
/// Hessian there is not negative definite. Precision eigenvalues are floored
/// at `floor`.
pub fn laplace_approximation<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    x0: &DVector<f64>,
    max_iter: usize,
    floor: f64,
) -> Option<(Maximum, DMatrix<f64>)> {
    let best = maximize(f, x0, max_iter, 1e-5);
    if !best.value.is_finite() || best.x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let prec = symmetrize(&(-fd_hessian(f, &best.x, 1e-4)));
    if prec.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(prec);
    if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
        return None;
    }
    let inv_vals = eig.eigenvalues.map(|e| 1.0 / e.max(floor));
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    Some((best, symmetrize(&cov)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_and_hessian_of_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let f = |x: &DVector<f64>| -0.5 * (x.transpose() * &a * x)[(0, 0)] + x[0];
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let g = fd_gradient(&f, &x, 1e-6);
        let want = -(&a * &x) + DVector::from_vec(vec![1.0, 0.0]);
        assert!((g - want).norm() < 1e-8);
        let h = fd_hessian(&f, &x, 1e-4);
        assert!((h + &a).norm() < 1e-6);
    }

    #[test]
    fn laplace_is_exact_for_gaussian() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 0.5, 0.0, 0.1, 0.0, 2.0]);
        let prec = cov.clone().try_inverse().unwrap();
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let f = |x: &DVector<f64>| {
            let d = x - &mean;
            -0.5 * (d.transpose() * &prec * &d)[(0, 0)]
        };
        let (m, c) = laplace_approximation(&f, &DVector::zeros(3), 200, 1e-6).unwrap();
        assert!((m.x - &mean).norm() < 1e-5);
        assert!((c - cov).norm() < 1e-5);
    }

    #[test]
    fn quartic_mode_matches_grid_search() {
        let f = |x: &DVector<f64>| {
            let v = x[0];
            -(v - 0.7).powi(2) - 0.5 * (v - 0.7).powi(4)
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=40_000 {
            let v = -2.0 + 4.0 * i as f64 / 40_000.0;
            let fv = f(&DVector::from_element(1, v));
            if fv > best.0 {
                best = (fv, v);
            }
        }
        let m = maximize(&f, &DVector::zeros(1), 100, 1e-8);
        assert!((best.1 - 0.7).abs() < 1e-3);
        assert!((m.x[0] - best.1).abs() < 0.01);
    }

    #[test]
    fn laplace_rejects_saddle() {
        let f = |x: &DVector<f64>| x[0] * x[0] - x[1] * x[1];
        assert!(laplace_approximation(&f, &DVector::zeros(2), 50, 1e-6).is_none());
    }

    #[test]
    fn early_stop_respects_budget() {
        let f = |x: &DVector<f64>| -(x[0] - 3.0).powi(2) - 10.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = maximize(&f, &DVector::zeros(2), 3, 1e-12);
        assert!(m.iterations <= 3);
        assert!(m.value > f(&DVector::zeros(2)));
    }
}
