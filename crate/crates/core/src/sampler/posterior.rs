//! The deformable-template posterior `π_θ(I, X | Y)` as a sampler target.
//!
//! The chain works in latent coordinates `z = (β, log λ)` (or `z = β` when
//! the scale factor is disabled); the log-Jacobian of `λ = e^{z_last}` is
//! part of the target, and pseudo-priors are Gaussian in `z`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use super::optimize::{laplace_approximation, maximize};
use super::{
    rwmh_step, run_chain, ChainDiagnostics, ChainSettings, GaussianPseudoPrior, Target,
};
use crate::deformation::DeformationModel;
use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetrize;
use crate::model::{HiddenState, ModelParams, Observation, PreparedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoPriorMode {
    /// Mode by quasi-Newton, covariance from the finite-difference Hessian.
    Laplace,
    /// Mode by quasi-Newton, covariance set to the class prior covariance.
    LaplacePriorCovariance,
    /// Sample moments of a short random walk on the class posterior.
    RwMoments,
}

/// Number of sweeps `m_n` as a function of the stream index `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainSchedule {
    Fixed { sweeps: usize },
    /// `early` sweeps while `n ≤ threshold`, `late` afterwards.
    Stepped {
        threshold: u64,
        early: usize,
        late: usize,
    },
}

impl ChainSchedule {
    pub fn sweeps(&self, n: u64) -> usize {
        match *self {
            ChainSchedule::Fixed { sweeps } => sweeps,
            ChainSchedule::Stepped {
                threshold,
                early,
                late,
            } => {
                if n <= threshold {
                    early
                } else {
                    late
                }
            }
        }
    }

    fn min_sweeps(&self) -> usize {
        match *self {
            ChainSchedule::Fixed { sweeps } => sweeps,
            ChainSchedule::Stepped { early, late, .. } => early.min(late),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub schedule: ChainSchedule,
    pub burn_in: usize,
    pub inner_steps: usize,
    pub target_acceptance: f64,
    /// Proposal scale in prior-standard-deviation units before adaptation.
    pub initial_scale: f64,
    pub adapt: bool,
    pub pseudo_prior: PseudoPriorMode,
    pub rw_moment_steps: usize,
    pub optimizer_max_iter: usize,
}

impl SamplerConfig {
    pub fn curve_defaults() -> Self {
        Self {
            schedule: ChainSchedule::Fixed { sweeps: 300 },
            burn_in: 100,
            inner_steps: 5,
            target_acceptance: 0.4,
            initial_scale: 0.5,
            adapt: true,
            pseudo_prior: PseudoPriorMode::Laplace,
            rw_moment_steps: 100,
            optimizer_max_iter: 25,
        }
    }

    pub fn image_defaults() -> Self {
        Self {
            schedule: ChainSchedule::Stepped {
                threshold: 100,
                early: 200,
                late: 500,
            },
            burn_in: 100,
            inner_steps: 20,
            target_acceptance: 0.4,
            initial_scale: 0.3,
            adapt: true,
            pseudo_prior: PseudoPriorMode::RwMoments,
            rw_moment_steps: 100,
            optimizer_max_iter: 25,
        }
    }

    pub fn settings(&self, n: u64) -> ChainSettings {
        ChainSettings {
            sweeps: self.schedule.sweeps(n),
            burn_in: self.burn_in,
            inner_steps: self.inner_steps,
            target_acceptance: self.target_acceptance,
            adapt: self.adapt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ChainSettings {
            sweeps: self.schedule.min_sweeps(),
            ..self.settings(1)
        }
        .validate()?;
        if !(self.initial_scale > 0.0 && self.initial_scale.is_finite()) {
            return Err(Error::invalid("initial proposal scale must be positive"));
        }
        if self.pseudo_prior == PseudoPriorMode::RwMoments && self.rw_moment_steps < 2 {
            return Err(Error::invalid("random-walk moments need at least 2 steps"));
        }
        Ok(())
    }
}

/// `log π_θ(I = j, z | Y)` for one observation.
#[derive(Debug, Clone)]
pub struct PosteriorTarget<'a> {
    prepared: PreparedParams<'a>,
    model: &'a DeformationModel,
    y: &'a Observation,
    log_weights: Vec<f64>,
    proposal_std: Vec<DVector<f64>>,
}

impl<'a> PosteriorTarget<'a> {
    pub fn new(
        params: &'a ModelParams,
        model: &'a DeformationModel,
        y: &'a Observation,
    ) -> Result<Self> {
        check_dim("observation length", model.grid_len(), y.len())?;
        check_dim("template size", model.num_basis(), params.num_basis())?;
        check_dim("beta dimension", model.beta_dim(), params.beta_dim())?;
        if y.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observation has non-finite values"));
        }
        let prepared = params.prepare()?;
        let lam_sd = 1.0 / params.gamma_a.sqrt();
        let proposal_std = params
            .classes
            .iter()
            .map(|c| {
                let mut s: Vec<f64> = c.gamma.diagonal().iter().map(|v| v.sqrt()).collect();
                if params.scale_enabled {
                    s.push(lam_sd);
                }
                DVector::from_vec(s)
            })
            .collect();
        Ok(Self {
            prepared,
            model,
            y,
            log_weights: params.classes.iter().map(|c| c.weight.ln()).collect(),
            proposal_std,
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.prepared.params
    }

    pub fn latent_dim(&self) -> usize {
        self.params().latent_dim()
    }

    /// Prior of `z` under class `j`: `N(μ, Γ_j)` for `β` and a moment-matched
    /// Gaussian for `log λ`.
    pub fn prior_moments(&self, class: usize) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.params();
        let d = p.beta_dim();
        let dz = p.latent_dim();
        let mut mean = DVector::zeros(dz);
        let mut cov = DMatrix::zeros(dz, dz);
        mean.rows_mut(0, d).copy_from(&p.beta_prior_mean);
        cov.view_mut((0, 0), (d, d)).copy_from(&p.classes[class].gamma);
        if p.scale_enabled {
            mean[d] = digamma(p.gamma_a) - p.gamma_b.ln();
            cov[(d, d)] = 1.0 / p.gamma_a;
        }
        (mean, cov)
    }

    pub fn log_target_z(&self, class: usize, z: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(class, z)?.0)
    }

    /// `(log π(j, z | Y), log g_θ(Y | j, X))`; both are `−∞` when the warp
    /// quadrature overflows.
    pub fn evaluate(&self, class: usize, z: &DVector<f64>) -> Result<(f64, f64)> {
        let p = self.params();
        let d = p.beta_dim();
        let state = latent_to_hidden(p, class, z);
        let phi = match self.model.design_matrix(state.beta.as_slice()) {
            Ok(phi) => phi,
            Err(Error::Quadrature { .. }) => return Ok((f64::NEG_INFINITY, f64::NEG_INFINITY)),
            Err(e) => return Err(e),
        };
        let mean = &phi * &p.classes[class].alpha * state.scale;
        let log_g = self.prepared.log_obs_density_from_mean(&self.y.values, &mean);
        let mut lp = log_g + self.prepared.log_hidden_prior(&state)? + self.log_weights[class];
        if p.scale_enabled {
            lp += z[d];
        }
        let clean = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
        Ok((clean(lp), clean(log_g)))
    }

    pub fn proposal_std(&self, class: usize) -> &DVector<f64> {
        &self.proposal_std[class]
    }
}

/// Maps latent coordinates to `(I, λ, β)`.
pub fn latent_to_hidden(params: &ModelParams, class: usize, z: &DVector<f64>) -> HiddenState {
    let d = params.beta_dim();
    HiddenState {
        class_index: class,
        scale: if params.scale_enabled { z[d].exp() } else { 1.0 },
        beta: z.rows(0, d).into_owned(),
    }
}

impl Target for PosteriorTarget<'_> {
    type State = DVector<f64>;

    fn num_classes(&self) -> usize {
        self.params().num_classes()
    }

    fn log_target(&self, class: usize, x: &DVector<f64>) -> Result<f64> {
        self.log_target_z(class, x)
    }

    fn propose<R: Rng + ?Sized>(
        &self,
        class: usize,
        x: &DVector<f64>,
        scale: f64,
        rng: &mut R,
    ) -> (DVector<f64>, f64) {
        let sd = &self.proposal_std[class];
        let prop = DVector::from_fn(x.len(), |i, _| {
            let e: f64 = rng.sample(StandardNormal);
            x[i] + scale * sd[i] * e
        });
        (prop, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPriorReport {
    pub class: usize,
    pub mode: PseudoPriorMode,
    /// The construction failed and the class prior was used instead.
    pub fell_back: bool,
    pub mean: Vec<f64>,
    pub log_target_at_mean: f64,
}

/// Gaussian pseudo-priors for every class of `target`.
pub fn build_pseudo_priors<R: Rng + ?Sized>(
    target: &PosteriorTarget<'_>,
    config: &SamplerConfig,
    scales: &[f64],
    rng: &mut R,
) -> Result<(Vec<GaussianPseudoPrior>, Vec<PseudoPriorReport>)> {
    let c = target.num_classes();
    let mut priors = Vec::with_capacity(c);
    let mut reports = Vec::with_capacity(c);
    for j in 0..c {
        let (prior_mean, prior_cov) = target.prior_moments(j);
        let f = |z: &DVector<f64>| target.log_target_z(j, z).unwrap_or(f64::NEG_INFINITY);
        let start_value = f(&prior_mean);
        let built = match config.pseudo_prior {
            PseudoPriorMode::Laplace => {
                laplace_approximation(&f, &prior_mean, config.optimizer_max_iter, 1e-6)
                    .filter(|(m, _)| m.value >= start_value)
                    .map(|(m, cov)| (m.x, cov))
            }
            PseudoPriorMode::LaplacePriorCovariance => {
                let m = maximize(&f, &prior_mean, config.optimizer_max_iter, 1e-5);
                (m.value.is_finite() && m.value >= start_value).then(|| (m.x, prior_cov.clone()))
            }
            PseudoPriorMode::RwMoments => {
                rw_moments(target, j, &prior_mean, &prior_cov, config, scales[j], rng)?
            }
        };
        let (mean, cov, fell_back) = match built {
            Some((mean, cov)) if mean.iter().all(|v| v.is_finite()) => (mean, cov, false),
            _ => {
                log::debug!("pseudo-prior construction for class {j} failed; using the class prior");
                (prior_mean.clone(), prior_cov.clone(), true)
            }
        };
        let (kappa, fell_back) = match GaussianPseudoPrior::new(mean, cov) {
            Ok(k) => (k, fell_back),
            Err(_) => (GaussianPseudoPrior::new(prior_mean, prior_cov)?, true),
        };
        reports.push(PseudoPriorReport {
            class: j,
            mode: config.pseudo_prior,
            fell_back,
            mean: kappa.mean.as_slice().to_vec(),
            log_target_at_mean: f(&kappa.mean),
        });
        priors.push(kappa);
    }
    Ok((priors, reports))
}

fn rw_moments<R: Rng + ?Sized>(
    target: &PosteriorTarget<'_>,
    class: usize,
    start: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    config: &SamplerConfig,
    scale: f64,
    rng: &mut R,
) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
    let mut x = start.clone();
    let mut lp = target.log_target_z(class, &x)?;
    if !lp.is_finite() {
        return Ok(None);
    }
    let n = config.rw_moment_steps;
    let dz = x.len();
    let mut sum = DVector::zeros(dz);
    let mut outer = DMatrix::zeros(dz, dz);
    for _ in 0..n {
        rwmh_step(target, class, &mut x, &mut lp, scale, rng)?;
        sum += &x;
        outer.ger(1.0, &x, &x, 1.0);
    }
    let mean = &sum / n as f64;
    let cov = (outer - &mean * mean.transpose() * n as f64) / (n - 1) as f64;
    let reg = DMatrix::from_diagonal(&prior_cov.diagonal()) * 0.1;
    Ok(Some((mean, symmetrize(&(cov + reg)))))
}

/// Posterior draws for one observation under the current parameters.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub samples: Vec<HiddenState>,
    pub diagnostics: ChainDiagnostics,
    pub pseudo_priors: Vec<PseudoPriorReport>,
}

/// Builds pseudo-priors and runs the Carlin–Chib chain for `y` at stream
/// index `n`. `scales` carries the per-class proposal scales between calls.
pub fn sample_posterior<R: Rng + ?Sized>(
    params: &ModelParams,
    model: &DeformationModel,
    y: &Observation,
    config: &SamplerConfig,
    n: u64,
    scales: &mut [f64],
    rng: &mut R,
) -> Result<PosteriorDraws> {
    let target = PosteriorTarget::new(params, model, y)?;
    check_dim("proposal scale count", params.num_classes(), scales.len())?;
    let (pseudo, reports) = build_pseudo_priors(&target, config, scales, rng)?;
    let run = run_chain(&target, &pseudo, &config.settings(n), scales, rng)?;
    let samples = run
        .samples
        .iter()
        .map(|(j, z)| latent_to_hidden(params, *j, z))
        .collect();
    Ok(PosteriorDraws {
        samples,
        diagnostics: run.diagnostics,
        pseudo_priors: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::{DesignGrid, KernelDictionary, Warp};
    use crate::model::ClassParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Identity warp: the posterior of β is exactly Gaussian (the prior).
    fn linear_setup() -> (ModelParams, DeformationModel, Observation) {
        let grid = DesignGrid::regular_line(0.0, 1.0, 8).unwrap();
        let dict = KernelDictionary::regular_line(0.0, 1.0, 3, 0.1).unwrap();
        let model = DeformationModel::new(dict, Warp::Identity { beta_dim: 2 }, grid).unwrap();
        let class = ClassParams {
            alpha: DVector::from_vec(vec![1.0, 0.5, 0.8]),
            gamma: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            weight: 0.5,
        };
        let params = ModelParams {
            classes: vec![class.clone(), class],
            sigma2: 0.1,
            gamma_a: 10.0,
            gamma_b: 10.0,
            beta_prior_mean: DVector::from_vec(vec![0.2, -0.1]),
            scale_enabled: false,
            nonnegative_templates: false,
        };
        let y = Observation::new(DVector::from_fn(8, |i, _| 0.1 * i as f64));
        (params, model, y)
    }

    #[test]
    fn schedules() {
        let c = SamplerConfig::image_defaults();
        assert_eq!(c.schedule.sweeps(100), 200);
        assert_eq!(c.schedule.sweeps(101), 500);
        assert_eq!(c.burn_in, 100);
        let c = SamplerConfig::curve_defaults();
        let s = c.settings(7);
        assert_eq!(s.sweeps - s.burn_in, 200);
    }

    #[test]
    fn laplace_exact_on_gaussian_posterior() {
        let (params, model, y) = linear_setup();
        let target = PosteriorTarget::new(&params, &model, &y).unwrap();
        let mut config = SamplerConfig::curve_defaults();
        config.optimizer_max_iter = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pp, reports) = build_pseudo_priors(&target, &config, &[1.0, 1.0], &mut rng).unwrap();
        assert!(!reports[0].fell_back);
        assert!((&pp[0].mean - &params.beta_prior_mean).norm() < 1e-5);
        assert!((&pp[0].cov - &params.classes[0].gamma).norm() < 1e-5);
        // symmetric classes give coinciding pseudo-priors
        assert!((&pp[0].mean - &pp[1].mean).norm() < 1e-8);
    }

    #[test]
    fn jacobian_makes_log_scale_target_consistent() {
        let (mut params, model, y) = linear_setup();
        params.scale_enabled = true;
        let target = PosteriorTarget::new(&params, &model, &y).unwrap();
        let z = DVector::from_vec(vec![0.1, 0.0, 0.2]);
        let state = latent_to_hidden(&params, 1, &z);
        let phi = model.design_matrix(state.beta.as_slice()).unwrap();
        let direct = crate::model::log_complete_likelihood(&params, &state, &y, &phi).unwrap();
        let got = target.log_target_z(1, &z).unwrap();
        assert!((got - direct - 0.2).abs() < 1e-12);
    }

    #[test]
    fn adaptation_reaches_target_acceptance() {
        let side = 6;
        let grid = DesignGrid::pixel_grid(side).unwrap();
        let dict = KernelDictionary::regular_square(-1.0, 1.0, side, 0.1).unwrap();
        let warp = crate::deformation::ImageDeformModel::regular(3, 0.16).unwrap();
        let d = warp.beta_dim();
        let mean = warp.identity_beta();
        let model = DeformationModel::new(dict, Warp::Image(warp), grid).unwrap();
        let m = side * side;
        let params = ModelParams {
            classes: vec![ClassParams {
                alpha: DVector::from_fn(m, |i, _| ((i * 7) % 5) as f64 * 0.2),
                gamma: DMatrix::identity(d, d) * 0.01,
                weight: 1.0,
            }],
            sigma2: 0.04,
            gamma_a: 10.0,
            gamma_b: 10.0,
            beta_prior_mean: mean.clone(),
            scale_enabled: false,
            nonnegative_templates: false,
        };
        let phi = model.design_matrix(mean.as_slice()).unwrap();
        let y = Observation::new(&phi * &params.classes[0].alpha);
        let mut config = SamplerConfig::image_defaults();
        config.schedule = ChainSchedule::Fixed { sweeps: 500 };
        config.burn_in = 300;
        config.inner_steps = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut scales = [config.initial_scale];
        let draws =
            sample_posterior(&params, &model, &y, &config, 1, &mut scales, &mut rng).unwrap();
        let acc = draws.diagnostics.acceptance_rate;
        assert!((acc - 0.4).abs() <= 0.1, "acceptance {acc}");
    }

    #[test]
    fn sample_posterior_is_reproducible() {
        let (params, model, y) = linear_setup();
        let mut config = SamplerConfig::curve_defaults();
        config.schedule = ChainSchedule::Fixed { sweeps: 60 };
        config.burn_in = 20;
        let go = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut scales = [0.5, 0.5];
            sample_posterior(&params, &model, &y, &config, 1, &mut scales, &mut rng).unwrap()
        };
        let (a, b) = (go(), go());
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.len(), 40);
    }
}
