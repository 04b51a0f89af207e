//! Template initialization: k-means centroids projected on the template
//! basis, or random coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::deformation::DeformationModel;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{nonneg_quadratic_min, solve_ridge};
use crate::model::Observation;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<DVector<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub reseeded: usize,
}

fn nearest(x: &DVector<f64>, centroids: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = (x - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. An emptied cluster is reseeded
/// at the point farthest from its current centroid.
pub fn kmeans<R: Rng + ?Sized>(data: &[DVector<f64>], k: usize, max_iter: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if data.len() < k {
        return Err(Error::invalid(format!("k-means with {k} clusters needs at least {k} points, got {}", data.len())));
    }
    let dim = data[0].len();
    for x in data {
        check_dim("k-means point", dim, x.len())?;
    }
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = data.iter().map(|x| nearest(x, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick].clone());
    }
    let mut assignments = vec![usize::MAX; data.len()];
    let mut iterations = 0;
    let mut reseeded = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; data.len()];
        for (i, x) in data.iter().enumerate() {
            let (j, d) = nearest(x, &centroids);
            dist[i] = d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::zeros(dim); k];
        for (x, &j) in data.iter().zip(&assignments) {
            counts[j] += 1;
            sums[j] += x;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = &sums[j] / counts[j] as f64;
                continue;
            }
            let far = (0..data.len())
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::invalid("k-means cannot reseed an empty cluster"))?;
            let from = assignments[far];
            counts[from] -= 1;
            sums[from] -= &data[far];
            centroids[from] = &sums[from] / counts[from] as f64;
            assignments[far] = j;
            counts[j] = 1;
            sums[j] = data[far].clone();
            centroids[j] = data[far].clone();
            dist[far] = 0.0;
            reseeded += 1;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
        reseeded,
    })
}

/// `(ΦᵀΦ)⁻¹Φᵀc`, with a `1e-10` relative ridge when `ΦᵀΦ` is singular and
/// a nonnegative least-squares solve when `nonnegative`.
pub fn project_on_basis(phi: &DMatrix<f64>, c: &DVector<f64>, nonnegative: bool) -> Result<DVector<f64>> {
    check_dim("centroid length", phi.nrows(), c.len())?;
    let q = phi.transpose() * phi;
    let b = phi.transpose() * c;
    let ls = match q.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => solve_ridge(&q, &b, 1e-10)?,
    };
    if nonnegative && ls.iter().any(|v| *v < 0.0) {
        return Ok(nonneg_quadratic_min(&q, &b, &ls, 10_000));
    }
    Ok(ls)
}

/// k-means on the raw observation vectors, then one least-squares template
/// per centroid at the reference deformation.
pub fn kmeans_init<R: Rng + ?Sized>(
    sample: &[Observation],
    classes: usize,
    model: &DeformationModel,
    max_iter: usize,
    nonnegative: bool,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, KMeans)> {
    let data: Vec<DVector<f64>> = sample.iter().map(|o| o.values.clone()).collect();
    let km = kmeans(&data, classes, max_iter, rng)?;
    let phi = model.reference_design_matrix()?;
    let alphas = km
        .centroids
        .iter()
        .map(|c| project_on_basis(&phi, c, nonnegative))
        .collect::<Result<Vec<_>>>()?;
    Ok((alphas, km))
}

/// Independent uniform coefficients on `[0, amplitude)`.
pub fn random_init<R: Rng + ?Sized>(classes: usize, m: usize, amplitude: f64, rng: &mut R) -> Vec<DVector<f64>> {
    (0..classes)
        .map(|_| DVector::from_fn(m, |_, _| rng.random::<f64>() * amplitude))
        .collect()
}
