//! Mixture of deformable templates: parameters, densities and the
//! curved-exponential-family decomposition of the complete-data likelihood.
//!
//! For one observation with missing data `(I, λ, β)` the complete-data
//! log-likelihood is
//!
//! ```text
//! log L = log N(Y; λ Φ_β α_I, σ² Id) + log N(β; μ, Γ_I) + log Gamma(λ; a, b) + log ω_I
//!       = t(θ) + Σ_j ⟨r_j(θ), S_j(I, λ, β, Y)⟩
//! ```
//!
//! `μ` is a fixed prior mean; the sufficient statistic for `Γ_j` is the
//! centered outer product `(β − μ)(β − μ)ᵀ`. Class indices are 0-based.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::deformation::DeformationModel;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    cholesky_lower, cholesky_quad_form, log_det_from_cholesky, min_eigenvalue, sample_gaussian,
};

/// Lower clamp applied to the noise variance after every M-step.
pub const SIGMA2_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: DVector<f64>,
    /// Class of origin, only known for test sets.
    #[serde(default)]
    pub label: Option<usize>,
}

impl Observation {
    pub fn new(values: DVector<f64>) -> Self {
        Self {
            values,
            label: None,
        }
    }

    pub fn labeled(values: DVector<f64>, label: usize) -> Self {
        Self {
            values,
            label: Some(label),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    /// Template coefficients, length `m`.
    pub alpha: DVector<f64>,
    /// Deformation covariance, `d_β × d_β`.
    pub gamma: DMatrix<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub classes: Vec<ClassParams>,
    pub sigma2: f64,
    /// Gamma prior shape `a` of the scale factor (fixed).
    pub gamma_a: f64,
    /// Gamma prior rate `b` of the scale factor (fixed).
    pub gamma_b: f64,
    /// Fixed prior mean `μ` of the deformation.
    pub beta_prior_mean: DVector<f64>,
    /// When false, `λ ≡ 1` and the Gamma factor is dropped.
    pub scale_enabled: bool,
    /// Restricts templates to the nonnegative orthant (curve mode).
    #[serde(default)]
    pub nonnegative_templates: bool,
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_basis(&self) -> usize {
        self.classes.first().map_or(0, |c| c.alpha.len())
    }

    pub fn beta_dim(&self) -> usize {
        self.beta_prior_mean.len()
    }

    /// Dimension of the unconstrained latent coordinates `(β, log λ)`.
    pub fn latent_dim(&self) -> usize {
        self.beta_dim() + usize::from(self.scale_enabled)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one class is required"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(self.gamma_a > 0.0 && self.gamma_b > 0.0) {
            return Err(Error::invalid("gamma hyperparameters must be positive"));
        }
        let m = self.num_basis();
        let d = self.beta_dim();
        let mut total = 0.0;
        for (j, c) in self.classes.iter().enumerate() {
            check_dim("class alpha", m, c.alpha.len())?;
            check_dim("class gamma rows", d, c.gamma.nrows())?;
            check_dim("class gamma cols", d, c.gamma.ncols())?;
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::invalid(format!("class {j} weight {} outside (0, 1]", c.weight)));
            }
            if d > 0 && !(min_eigenvalue(&c.gamma) > 0.0) {
                return Err(Error::invalid(format!("class {j} gamma is not positive definite")));
            }
            if self.nonnegative_templates && c.alpha.iter().any(|&a| a < 0.0) {
                return Err(Error::invalid(format!("class {j} alpha has negative entries")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Per-class factorizations used by the hot density evaluations.
    pub fn prepare(&self) -> Result<PreparedParams<'_>> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        let mut chol = Vec::with_capacity(self.classes.len());
        let mut log_det = Vec::with_capacity(self.classes.len());
        for (j, c) in self.classes.iter().enumerate() {
            let l = cholesky_lower(&c.gamma, &format!("gamma of class {j}"))?;
            log_det.push(log_det_from_cholesky(&l));
            chol.push(l);
        }
        Ok(PreparedParams {
            params: self,
            chol,
            log_det,
            gamma_log_norm: self.gamma_a * self.gamma_b.ln() - ln_gamma(self.gamma_a),
        })
    }
}

/// Missing data for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub class_index: usize,
    pub scale: f64,
    pub beta: DVector<f64>,
}

/// [`ModelParams`] with cached Cholesky factors of every `Γ_j`.
#[derive(Debug, Clone)]
pub struct PreparedParams<'a> {
    pub params: &'a ModelParams,
    pub chol: Vec<DMatrix<f64>>,
    pub log_det: Vec<f64>,
    gamma_log_norm: f64,
}

impl PreparedParams<'_> {
    pub fn gamma_chol(&self, class: usize) -> &DMatrix<f64> {
        &self.chol[class]
    }

    /// `log g_θ(Y | I, X)` given the deformed template `λ Φ_β α_I`.
    pub fn log_obs_density_from_mean(&self, y: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let n = y.len() as f64;
        let s2 = self.params.sigma2;
        let rss = (y - mean).norm_squared();
        -0.5 * n * (2.0 * PI * s2).ln() - 0.5 * rss / s2
    }

    pub fn log_obs_density(
        &self,
        state: &HiddenState,
        y: &Observation,
        phi: &DMatrix<f64>,
    ) -> Result<f64> {
        let p = self.params;
        check_class(p, state.class_index)?;
        check_dim("observation length vs design rows", phi.nrows(), y.len())?;
        check_dim("design columns vs template size", p.num_basis(), phi.ncols())?;
        let mean = phi * &p.classes[state.class_index].alpha * state.scale;
        Ok(self.log_obs_density_from_mean(&y.values, &mean))
    }

    /// `log p_θ(X | I)` including every normalizing constant.
    pub fn log_hidden_prior(&self, state: &HiddenState) -> Result<f64> {
        let p = self.params;
        check_class(p, state.class_index)?;
        check_dim("hidden beta", p.beta_dim(), state.beta.len())?;
        let j = state.class_index;
        let d = p.beta_dim() as f64;
        let diff = &state.beta - &p.beta_prior_mean;
        let mut lp = -0.5 * d * (2.0 * PI).ln()
            - 0.5 * self.log_det[j]
            - 0.5 * cholesky_quad_form(&self.chol[j], &diff);
        if p.scale_enabled {
            let lam = state.scale;
            if !(lam > 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            lp += self.gamma_log_norm + (p.gamma_a - 1.0) * lam.ln() - p.gamma_b * lam;
        }
        Ok(lp)
    }

    pub fn log_complete_likelihood(
        &self,
        state: &HiddenState,
        y: &Observation,
        phi: &DMatrix<f64>,
    ) -> Result<f64> {
        let w = self.params.classes[check_class(self.params, state.class_index)?].weight;
        Ok(self.log_obs_density(state, y, phi)? + self.log_hidden_prior(state)? + w.ln())
    }
}

fn check_class(p: &ModelParams, j: usize) -> Result<usize> {
    if j < p.num_classes() {
        Ok(j)
    } else {
        Err(Error::invalid(format!(
            "class index {j} out of range for {} classes",
            p.num_classes()
        )))
    }
}

pub fn log_obs_density(
    params: &ModelParams,
    state: &HiddenState,
    y: &Observation,
    phi: &DMatrix<f64>,
) -> Result<f64> {
    if !(params.sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {}", params.sigma2)));
    }
    check_class(params, state.class_index)?;
    check_dim("observation length vs design rows", phi.nrows(), y.len())?;
    check_dim("design columns vs template size", params.num_basis(), phi.ncols())?;
    let mean = phi * &params.classes[state.class_index].alpha * state.scale;
    let n = y.len() as f64;
    let rss = (&y.values - mean).norm_squared();
    Ok(-0.5 * n * (2.0 * PI * params.sigma2).ln() - 0.5 * rss / params.sigma2)
}

pub fn log_hidden_prior(params: &ModelParams, state: &HiddenState) -> Result<f64> {
    check_class(params, state.class_index)?;
    let j = state.class_index;
    let l = cholesky_lower(&params.classes[j].gamma, &format!("gamma of class {j}"))?;
    check_dim("hidden beta", params.beta_dim(), state.beta.len())?;
    let d = params.beta_dim() as f64;
    let diff = &state.beta - &params.beta_prior_mean;
    let mut lp = -0.5 * d * (2.0 * PI).ln()
        - 0.5 * log_det_from_cholesky(&l)
        - 0.5 * cholesky_quad_form(&l, &diff);
    if params.scale_enabled {
        let (a, b, lam) = (params.gamma_a, params.gamma_b, state.scale);
        if !(lam > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        lp += a * b.ln() - ln_gamma(a) + (a - 1.0) * lam.ln() - b * lam;
    }
    Ok(lp)
}

pub fn log_complete_likelihood(
    params: &ModelParams,
    state: &HiddenState,
    y: &Observation,
    phi: &DMatrix<f64>,
) -> Result<f64> {
    let obs = log_obs_density(params, state, y, phi)?;
    let prior = log_hidden_prior(params, state)?;
    Ok(obs + prior + params.classes[state.class_index].weight.ln())
}

/// Per-class block of the natural parameter `r_j(θ)`, already carrying
/// the factor ½.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassNatural {
    pub r1: f64,
    pub r2: DVector<f64>,
    pub r3: DMatrix<f64>,
    pub r4: DMatrix<f64>,
    pub r5: f64,
    pub r6: f64,
    pub r7: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub t: f64,
    pub classes: Vec<ClassNatural>,
}

impl NaturalParams {
    /// `Σ_j ⟨r_j, S_j⟩`
    pub fn pair(&self, stats: &SuffStats) -> f64 {
        self.classes
            .iter()
            .zip(&stats.classes)
            .map(|(r, s)| {
                r.r1 * s.s1
                    + r.r2.dot(&s.s2)
                    + r.r3.component_mul(&s.s3).sum()
                    + r.r4.component_mul(&s.s4).sum()
                    + r.r5 * s.s5
                    + r.r6 * s.s6
                    + r.r7 * s.s7
            })
            .sum()
    }
}

/// `t(θ)` and `r(θ)` for observations of length `grid_len`.
///
/// The Gaussian normalizer of `β` is `−(d_β/2) log 2π`; the Gamma blocks are
/// zero when the scale factor is disabled.
pub fn natural_params(params: &ModelParams, grid_len: usize) -> Result<NaturalParams> {
    if !(params.sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {}", params.sigma2)));
    }
    let d = params.beta_dim() as f64;
    let inv_s2 = 1.0 / params.sigma2;
    let (a, b) = (params.gamma_a, params.gamma_b);
    let mut t = -0.5 * grid_len as f64 * (2.0 * PI * params.sigma2).ln() - 0.5 * d * (2.0 * PI).ln();
    if params.scale_enabled {
        t += a * b.ln() - ln_gamma(a);
    }
    let mut classes = Vec::with_capacity(params.num_classes());
    for (j, c) in params.classes.iter().enumerate() {
        let l = cholesky_lower(&c.gamma, &format!("gamma of class {j}"))?;
        let gamma_inv = c
            .gamma
            .clone()
            .cholesky()
            .expect("factorized above")
            .inverse();
        classes.push(ClassNatural {
            r1: c.weight.ln() - 0.5 * log_det_from_cholesky(&l),
            r2: &c.alpha * inv_s2,
            r3: &c.alpha * c.alpha.transpose() * (-0.5 * inv_s2),
            r4: gamma_inv * -0.5,
            r5: -0.5 * inv_s2,
            r6: if params.scale_enabled { -b } else { 0.0 },
            r7: if params.scale_enabled { a - 1.0 } else { 0.0 },
        });
    }
    Ok(NaturalParams { t, classes })
}

/// Objective maximized by the M-step: `t(θ) + Σ_j ⟨r_j(θ), s_j⟩`.
pub fn stats_objective(params: &ModelParams, stats: &SuffStats, grid_len: usize) -> Result<f64> {
    let nat = natural_params(params, grid_len)?;
    Ok(nat.t + nat.pair(stats))
}

/// The seven blocks of `S_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub s1: f64,
    pub s2: DVector<f64>,
    pub s3: DMatrix<f64>,
    pub s4: DMatrix<f64>,
    pub s5: f64,
    pub s6: f64,
    pub s7: f64,
}

impl ClassStats {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            s1: 0.0,
            s2: DVector::zeros(m),
            s3: DMatrix::zeros(m, m),
            s4: DMatrix::zeros(d, d),
            s5: 0.0,
            s6: 0.0,
            s7: 0.0,
        }
    }

    fn axpy(&mut self, w: f64, other: &ClassStats) {
        self.s1 += w * other.s1;
        self.s2.axpy(w, &other.s2, 1.0);
        self.s3.zip_apply(&other.s3, |a, b| *a += w * b);
        self.s4.zip_apply(&other.s4, |a, b| *a += w * b);
        self.s5 += w * other.s5;
        self.s6 += w * other.s6;
        self.s7 += w * other.s7;
    }

    fn scale(&mut self, w: f64) {
        self.s1 *= w;
        self.s2 *= w;
        self.s3 *= w;
        self.s4 *= w;
        self.s5 *= w;
        self.s6 *= w;
        self.s7 *= w;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub classes: Vec<ClassStats>,
}

impl SuffStats {
    pub fn zeros(num_classes: usize, m: usize, d: usize) -> Self {
        Self {
            classes: vec![ClassStats::zeros(m, d); num_classes],
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::zeros(params.num_classes(), params.num_basis(), params.beta_dim())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.classes.iter().map(|c| c.s1).sum()
    }

    /// `self += w · other`
    pub fn add_scaled(&mut self, w: f64, other: &SuffStats) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.axpy(w, b);
        }
    }

    pub fn scale(&mut self, w: f64) {
        for c in &mut self.classes {
            c.scale(w);
        }
    }

    /// Adds `w · S(I, X, Y)` into the indicated class block only.
    pub fn accumulate(
        &mut self,
        params: &ModelParams,
        state: &HiddenState,
        y: &Observation,
        phi: &DMatrix<f64>,
        w: f64,
    ) -> Result<()> {
        let j = check_class(params, state.class_index)?;
        check_dim("observation length vs design rows", phi.nrows(), y.len())?;
        check_dim("design columns", self.classes[j].s2.len(), phi.ncols())?;
        check_dim("hidden beta", params.beta_dim(), state.beta.len())?;
        let lam = if params.scale_enabled { state.scale } else { 1.0 };
        let c = &mut self.classes[j];
        let diff = &state.beta - &params.beta_prior_mean;
        c.s1 += w;
        c.s2.gemv_tr(w * lam, phi, &y.values, 1.0);
        c.s3.gemm_tr(w * lam * lam, phi, phi, 1.0);
        c.s4.ger(w, &diff, &diff, 1.0);
        c.s5 += w * y.values.norm_squared();
        if params.scale_enabled {
            c.s6 += w * lam;
            c.s7 += w * lam.ln();
        } else {
            c.s6 += w;
        }
        Ok(())
    }
}

/// `S(I, X, Y)` for a single complete-data point.
pub fn sufficient_stats(
    params: &ModelParams,
    state: &HiddenState,
    y: &Observation,
    phi: &DMatrix<f64>,
) -> Result<SuffStats> {
    let mut s = SuffStats::for_params(params);
    s.accumulate(params, state, y, phi, 1.0)?;
    Ok(s)
}

/// Draws `(I, λ, β)` from the prior and `Y` from the observation model.
pub fn sample_generative<R: Rng + ?Sized>(
    params: &ModelParams,
    model: &DeformationModel,
    rng: &mut R,
) -> Result<(HiddenState, Observation)> {
    check_dim("template size", model.num_basis(), params.num_basis())?;
    check_dim("beta dimension", model.beta_dim(), params.beta_dim())?;
    let weights: Vec<f64> = params.classes.iter().map(|c| c.weight).collect();
    let class_index = WeightedIndex::new(&weights)
        .map_err(|e| Error::invalid(format!("bad weights: {e}")))?
        .sample(rng);
    let scale = if params.scale_enabled {
        Gamma::new(params.gamma_a, 1.0 / params.gamma_b)
            .map_err(|e| Error::invalid(format!("bad gamma prior: {e}")))?
            .sample(rng)
    } else {
        1.0
    };
    let c = &params.classes[class_index];
    let beta = if params.beta_dim() == 0 {
        DVector::zeros(0)
    } else {
        let l = cholesky_lower(&c.gamma, "deformation covariance")?;
        sample_gaussian(&params.beta_prior_mean, &l, rng)
    };
    let phi = model.design_matrix(beta.as_slice())?;
    let sd = params.sigma2.max(0.0).sqrt();
    let noise = crate::linalg::standard_normal_vector(phi.nrows(), rng);
    let values = &phi * &c.alpha * scale + noise * sd;
    Ok((
        HiddenState {
            class_index,
            scale,
            beta,
        },
        Observation::labeled(values, class_index),
    ))
}
