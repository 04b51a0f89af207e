//! Carlin–Chib Metropolis-within-Gibbs sampler on the extended space
//! `(I, X̃_1, …, X̃_C)`.
//!
//! The chain is generic over a [`Target`] (the unnormalized joint
//! `π(I = j, X | Y)`) and per-class [`LinkingDensity`] pseudo-priors, so the
//! same code drives the deformable-template posterior and small enumerable
//! toys.

mod optimize;
mod posterior;

pub use optimize::{fd_gradient, fd_hessian, laplace_approximation, maximize, Maximum};
pub use posterior::{
    build_pseudo_priors, latent_to_hidden, sample_posterior, ChainSchedule, PosteriorDraws,
    PosteriorTarget, PseudoPriorMode, PseudoPriorReport, SamplerConfig,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, gaussian_log_density, log_det_from_cholesky, log_sum_exp, sample_gaussian};

/// Unnormalized class-conditional posterior together with its random-walk
/// proposal.
pub trait Target {
    type State: Clone;

    fn num_classes(&self) -> usize;

    /// `log π(I = class, x | Y)` up to a constant shared by all classes.
    fn log_target(&self, class: usize, x: &Self::State) -> Result<f64>;

    /// Draws a proposal around `x` and returns it with the log proposal
    /// ratio `log q(x | x') − log q(x' | x)` (zero for symmetric moves).
    fn propose<R: Rng + ?Sized>(
        &self,
        class: usize,
        x: &Self::State,
        scale: f64,
        rng: &mut R,
    ) -> (Self::State, f64);
}

/// Normalized pseudo-prior `κ_j`.
pub trait LinkingDensity<S> {
    fn log_density(&self, x: &S) -> f64;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> S;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPseudoPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    #[serde(skip)]
    chol: Option<DMatrix<f64>>,
}

impl GaussianPseudoPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        crate::error::check_dim("pseudo-prior covariance", mean.len(), cov.nrows())?;
        let chol = cholesky_lower(&cov, "pseudo-prior covariance")?;
        Ok(Self {
            mean,
            cov,
            chol: Some(chol),
        })
    }

    fn chol(&self) -> &DMatrix<f64> {
        self.chol.as_ref().expect("constructed through new")
    }

    pub fn log_det(&self) -> f64 {
        log_det_from_cholesky(self.chol())
    }
}

impl LinkingDensity<DVector<f64>> for GaussianPseudoPrior {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        gaussian_log_density(x, &self.mean, self.chol())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        sample_gaussian(&self.mean, self.chol(), rng)
    }
}

/// Extended state with cached `log π(j, X̃_j | Y)` and `log κ_j(X̃_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState<S> {
    pub class_index: usize,
    pub aux: Vec<S>,
    pub log_post: Vec<f64>,
    pub log_kappa: Vec<f64>,
}

impl<S: Clone> ChainState<S> {
    /// Draws every auxiliary from its pseudo-prior and `I` uniformly.
    pub fn initialize<T, K, R>(target: &T, pseudo: &[K], rng: &mut R) -> Result<Self>
    where
        T: Target<State = S>,
        K: LinkingDensity<S>,
        R: Rng + ?Sized,
    {
        let c = target.num_classes();
        crate::error::check_dim("pseudo-prior count", c, pseudo.len())?;
        let mut aux = Vec::with_capacity(c);
        let mut log_post = Vec::with_capacity(c);
        let mut log_kappa = Vec::with_capacity(c);
        for (j, k) in pseudo.iter().enumerate() {
            let x = k.sample(rng);
            log_kappa.push(k.log_density(&x));
            log_post.push(target.log_target(j, &x)?);
            aux.push(x);
        }
        Ok(Self {
            class_index: rng.random_range(0..c),
            aux,
            log_post,
            log_kappa,
        })
    }

    pub fn active(&self) -> &S {
        &self.aux[self.class_index]
    }

    /// Normalized `log π̃(I = j | X̃_{1:C}, Y)`.
    pub fn class_logweights(&self) -> Result<Vec<f64>> {
        class_conditional_logweights(&self.log_post, &self.log_kappa)
    }
}

/// Normalized class log-probabilities from `log π(j, X̃_j|Y) − log κ_j(X̃_j)`.
pub fn class_conditional_logweights(log_post: &[f64], log_kappa: &[f64]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = log_post
        .iter()
        .zip(log_kappa)
        .map(|(p, k)| p - k)
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
        .collect();
    let z = log_sum_exp(&raw);
    if !z.is_finite() {
        return Err(Error::DeadState);
    }
    Ok(raw.iter().map(|v| v - z).collect())
}

/// `min(1, exp(log_ratio))`, with NaN treated as rejection.
pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        0.0
    } else if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

pub(crate) fn sample_log_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = j;
        }
        acc += p;
        if u < acc {
            return j;
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accept_prob: f64,
    pub accepted: bool,
}

/// One Metropolis–Hastings update of `x` (with cached `log_p`) under class
/// `class`.
pub fn rwmh_step<T, R>(
    target: &T,
    class: usize,
    x: &mut T::State,
    log_p: &mut f64,
    scale: f64,
    rng: &mut R,
) -> Result<StepOutcome>
where
    T: Target,
    R: Rng + ?Sized,
{
    let (prop, log_q) = target.propose(class, x, scale, rng);
    let lp = target.log_target(class, &prop)?;
    let accept_prob = if lp == f64::NEG_INFINITY {
        0.0
    } else {
        acceptance_probability(lp - *log_p + log_q)
    };
    let accepted = rng.random::<f64>() < accept_prob;
    if accepted {
        *x = prop;
        *log_p = lp;
    }
    Ok(StepOutcome {
        accept_prob,
        accepted,
    })
}

/// Robbins–Monro adaptation of per-class log proposal scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleAdaptation {
    pub target_acceptance: f64,
    pub counts: Vec<u64>,
}

impl ScaleAdaptation {
    pub fn new(target_acceptance: f64, num_classes: usize) -> Self {
        Self {
            target_acceptance,
            counts: vec![0; num_classes],
        }
    }

    pub fn update(&mut self, class: usize, scale: &mut f64, accept_prob: f64) {
        self.counts[class] += 1;
        let gain = (self.counts[class] as f64).powf(-0.6);
        let log_s = scale.ln() + gain * (accept_prob - self.target_acceptance);
        *scale = log_s.clamp(-12.0, 4.0).exp();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepOutcome {
    pub switched: bool,
    pub proposals: usize,
    pub accepted: usize,
}

/// One transition of the Carlin–Chib kernel: draw `I′`, refresh the inactive
/// auxiliaries from their pseudo-priors, then move `X̃_{I′}` by
/// `inner_steps` random-walk updates.
pub fn cc_sweep<T, K, R>(
    target: &T,
    pseudo: &[K],
    state: &mut ChainState<T::State>,
    inner_steps: usize,
    scales: &mut [f64],
    mut adapt: Option<&mut ScaleAdaptation>,
    rng: &mut R,
) -> Result<SweepOutcome>
where
    T: Target,
    K: LinkingDensity<T::State>,
    R: Rng + ?Sized,
{
    let logw = state.class_logweights()?;
    let new_class = sample_log_categorical(&logw, rng);
    let switched = new_class != state.class_index;
    state.class_index = new_class;
    for (j, k) in pseudo.iter().enumerate() {
        if j == new_class {
            continue;
        }
        let x = k.sample(rng);
        state.log_kappa[j] = k.log_density(&x);
        state.log_post[j] = target.log_target(j, &x)?;
        state.aux[j] = x;
    }
    let mut accepted = 0;
    let j = new_class;
    for _ in 0..inner_steps {
        let out = rwmh_step(
            target,
            j,
            &mut state.aux[j],
            &mut state.log_post[j],
            scales[j],
            rng,
        )?;
        accepted += usize::from(out.accepted);
        if let Some(a) = adapt.as_deref_mut() {
            a.update(j, &mut scales[j], out.accept_prob);
        }
    }
    state.log_kappa[j] = pseudo[j].log_density(&state.aux[j]);
    Ok(SweepOutcome {
        switched,
        proposals: inner_steps,
        accepted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    /// Total sweeps including burn-in.
    pub sweeps: usize,
    pub burn_in: usize,
    pub inner_steps: usize,
    pub target_acceptance: f64,
    /// Adapt proposal scales during burn-in.
    pub adapt: bool,
}

impl ChainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in {
            return Err(Error::invalid(format!(
                "chain length {} must exceed burn-in {}",
                self.sweeps, self.burn_in
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("at least one inner random-walk step is required"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::invalid("target acceptance must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub sweeps: usize,
    pub kept: usize,
    /// Acceptance rate of the random-walk kernel after burn-in.
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    /// Fraction of post-burn-in sweeps that changed `I`.
    pub switch_rate: f64,
    /// Post-burn-in visits per class.
    pub class_visits: Vec<usize>,
    pub final_scales: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ChainRun<S> {
    /// Post-burn-in marginal draws `(I[k], X̃_{I[k]}[k])`.
    pub samples: Vec<(usize, S)>,
    pub diagnostics: ChainDiagnostics,
}

/// Runs `settings.sweeps` sweeps and keeps the draws after burn-in.
/// `scales` holds the per-class proposal scales and is updated in place.
pub fn run_chain<T, K, R>(
    target: &T,
    pseudo: &[K],
    settings: &ChainSettings,
    scales: &mut [f64],
    rng: &mut R,
) -> Result<ChainRun<T::State>>
where
    T: Target,
    K: LinkingDensity<T::State>,
    R: Rng + ?Sized,
{
    settings.validate()?;
    let c = target.num_classes();
    crate::error::check_dim("proposal scale count", c, scales.len())?;
    let mut state = ChainState::initialize(target, pseudo, rng)?;
    let mut adapt = ScaleAdaptation::new(settings.target_acceptance, c);
    let kept = settings.sweeps - settings.burn_in;
    let mut samples = Vec::with_capacity(kept);
    let mut diag = ChainDiagnostics {
        sweeps: settings.sweeps,
        kept,
        class_visits: vec![0; c],
        ..Default::default()
    };
    let (mut burn_acc, mut burn_prop, mut acc, mut prop, mut switches) = (0, 0, 0, 0, 0);
    for k in 0..settings.sweeps {
        let burning = k < settings.burn_in;
        let a = if burning && settings.adapt {
            Some(&mut adapt)
        } else {
            None
        };
        let out = cc_sweep(target, pseudo, &mut state, settings.inner_steps, scales, a, rng)?;
        if burning {
            burn_acc += out.accepted;
            burn_prop += out.proposals;
        } else {
            acc += out.accepted;
            prop += out.proposals;
            switches += usize::from(out.switched);
            diag.class_visits[state.class_index] += 1;
            samples.push((state.class_index, state.active().clone()));
        }
    }
    diag.acceptance_rate = acc as f64 / prop.max(1) as f64;
    diag.burn_in_acceptance_rate = burn_acc as f64 / burn_prop.max(1) as f64;
    diag.switch_rate = switches as f64 / kept as f64;
    diag.final_scales = scales.to_vec();
    Ok(ChainRun {
        samples,
        diagnostics: diag,
    })
}
