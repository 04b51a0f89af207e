//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Symmetrize and clamp eigenvalues from below.
pub fn spd_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Lower Cholesky factor, or an invalid-parameter error naming `what`.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::invalid(format!("{what} is not symmetric positive definite")))
}

pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `xᵀ A⁻¹ x` through the lower Cholesky factor of `A`.
pub fn cholesky_quad_form(l: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let z = l
        .solve_lower_triangular(x)
        .expect("cholesky factor has a nonzero diagonal");
    z.norm_squared()
}

/// Solves `(A + ε·tr(A)/n·I) x = b` with `ε = ridge`.
pub fn solve_ridge(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let n = a.nrows();
    let shift = ridge * a.trace() / n as f64;
    let mut reg = symmetrize(a);
    for i in 0..n {
        reg[(i, i)] += shift;
    }
    reg.cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| Error::invalid("regularized normal matrix is not positive definite"))
}

/// Minimizes `½ xᵀQx − cᵀx` over the nonnegative orthant by cyclic
/// coordinate descent from `start` (projected onto the orthant first).
pub fn nonneg_quadratic_min(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    start: &DVector<f64>,
    sweeps: usize,
) -> DVector<f64> {
    let n = c.len();
    let mut x = start.map(|v| v.max(0.0));
    let mut grad = q * &x - c;
    for _ in 0..sweeps {
        let mut moved = 0.0f64;
        for i in 0..n {
            let qii = q[(i, i)];
            if qii <= 0.0 {
                continue;
            }
            let new = (x[i] - grad[i] / qii).max(0.0);
            let delta = new - x[i];
            if delta != 0.0 {
                x[i] = new;
                for k in 0..n {
                    grad[k] += q[(k, i)] * delta;
                }
                moved = moved.max(delta.abs());
            }
        }
        if moved < 1e-14 {
            break;
        }
    }
    x
}

/// `½ xᵀQx − cᵀx`
pub fn quadratic_value(q: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * (x.transpose() * q * x)[(0, 0)] - c.dot(x)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draws from `N(mean, L Lᵀ)`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol_lower: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    mean + chol_lower * standard_normal_vector(mean.len(), rng)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-density of `N(mean, L Lᵀ)` at `x`.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol_lower: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * log_det_from_cholesky(chol_lower)
        - 0.5 * cholesky_quad_form(chol_lower, &diff)
}
