use nalgebra::DMatrix;

use crate::deformation::{DeformationModel, Warp};
use crate::error::{check_dim, Error, Result};
use crate::linalg::log_sum_exp;
use crate::model::{HiddenState, ModelParams, Observation, SuffStats};
use crate::rng::StreamRng;
use crate::sampler::{sample_posterior, ChainDiagnostics, SamplerConfig};

#[derive(Debug, Clone)]
pub struct EStepOutput {
    /// `E[S(I, X, Y)]` under the (approximate) posterior.
    pub stats: SuffStats,
    pub diagnostics: Option<ChainDiagnostics>,
    pub pseudo_prior_fallbacks: usize,
}

/// Conditional expectation of the sufficient statistics for one observation.
pub trait EStep: Sync {
    fn model(&self) -> &DeformationModel;

    fn expected_stats(
        &self,
        params: &ModelParams,
        y: &Observation,
        n: u64,
        scales: &mut [f64],
        rng: &mut StreamRng,
    ) -> Result<EStepOutput>;
}

/// Averages `S` over the post-burn-in draws of the Carlin–Chib chain.
#[derive(Debug, Clone)]
pub struct CarlinChibEStep {
    pub model: DeformationModel,
    pub sampler: SamplerConfig,
}

impl CarlinChibEStep {
    pub fn new(model: DeformationModel, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate()?;
        Ok(Self { model, sampler })
    }
}

/// Monte Carlo mean of `S` over `samples`.
pub fn average_stats(
    params: &ModelParams,
    model: &DeformationModel,
    y: &Observation,
    samples: &[HiddenState],
) -> Result<SuffStats> {
    let mut stats = SuffStats::for_params(params);
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        let phi = model.design_matrix(s.beta.as_slice())?;
        stats.accumulate(params, s, y, &phi, w)?;
    }
    Ok(stats)
}

impl EStep for CarlinChibEStep {
    fn model(&self) -> &DeformationModel {
        &self.model
    }

    fn expected_stats(
        &self,
        params: &ModelParams,
        y: &Observation,
        n: u64,
        scales: &mut [f64],
        rng: &mut StreamRng,
    ) -> Result<EStepOutput> {
        let draws = sample_posterior(params, &self.model, y, &self.sampler, n, scales, rng)?;
        let stats = average_stats(params, &self.model, y, &draws.samples)?;
        Ok(EStepOutput {
            stats,
            diagnostics: Some(draws.diagnostics),
            pseudo_prior_fallbacks: draws.pseudo_priors.iter().filter(|p| p.fell_back).count(),
        })
    }
}

/// Exact posterior expectations when the design matrix does not depend on
/// the deformation and the scale factor is disabled: the model is then a
/// Gaussian mixture and `β | I = j` keeps its prior `N(μ, Γ_j)`.
#[derive(Debug, Clone)]
pub struct ExactMixtureEStep {
    model: DeformationModel,
    phi: DMatrix<f64>,
}

impl ExactMixtureEStep {
    pub fn new(model: DeformationModel) -> Result<Self> {
        if !matches!(model.warp, Warp::Identity { .. }) {
            return Err(Error::invalid("exact E-step needs the identity deformation"));
        }
        let phi = model.base_design_matrix();
        Ok(Self { model, phi })
    }

    /// Posterior class probabilities.
    pub fn responsibilities(&self, params: &ModelParams, y: &Observation) -> Result<Vec<f64>> {
        check_dim("observation length", self.phi.nrows(), y.len())?;
        let s2 = params.sigma2;
        let n = y.len() as f64;
        let logs: Vec<f64> = params
            .classes
            .iter()
            .map(|c| {
                let rss = (&y.values - &self.phi * &c.alpha).norm_squared();
                c.weight.ln() - 0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * rss / s2
            })
            .collect();
        let z = log_sum_exp(&logs);
        if !z.is_finite() {
            return Err(Error::DeadState);
        }
        Ok(logs.iter().map(|l| (l - z).exp()).collect())
    }
}

impl EStep for ExactMixtureEStep {
    fn model(&self) -> &DeformationModel {
        &self.model
    }

    fn expected_stats(
        &self,
        params: &ModelParams,
        y: &Observation,
        _n: u64,
        _scales: &mut [f64],
        _rng: &mut StreamRng,
    ) -> Result<EStepOutput> {
        if params.scale_enabled {
            return Err(Error::invalid("exact E-step needs the scale factor disabled"));
        }
        let resp = self.responsibilities(params, y)?;
        let mut stats = SuffStats::for_params(params);
        for (j, r) in resp.iter().enumerate() {
            let state = HiddenState {
                class_index: j,
                scale: 1.0,
                beta: params.beta_prior_mean.clone(),
            };
            stats.accumulate(params, &state, y, &self.phi, *r)?;
            stats.classes[j].s4 += &params.classes[j].gamma * *r;
        }
        Ok(EStepOutput {
            stats,
            diagnostics: None,
            pseudo_prior_fallbacks: 0,
        })
    }
}
