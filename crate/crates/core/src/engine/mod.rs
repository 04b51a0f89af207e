//! Monte Carlo online EM: stochastic approximation of the sufficient
//! statistics, closed-form M-step and the batch SAEM baseline.

mod estep;
mod mstep;
mod saem;

pub use estep::{average_stats, CarlinChibEStep, EStep, EStepOutput, ExactMixtureEStep};
pub use mstep::{m_step, CovarianceStructure, MStepOptions, MStepOutcome};
pub use saem::{saem_batch, SaemConfig, SaemPoint, SaemRun};

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stats_objective, ModelParams, Observation, SuffStats};
use crate::rng::{stream_rng, Purpose};

/// `ϱ_n = n^(−exponent)`, so `ϱ_1 = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizeSchedule {
    pub exponent: f64,
}

impl Default for StepSizeSchedule {
    fn default() -> Self {
        Self { exponent: 0.6 }
    }
}

impl StepSizeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.exponent > 0.5 && self.exponent <= 1.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "step-size exponent {} outside (0.5, 1]",
                self.exponent
            )))
        }
    }

    pub fn step(&self, n: u64) -> f64 {
        (n.max(1) as f64).powf(-self.exponent)
    }
}

/// Update set `{first, second} ∪ {n ≥ every_from}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSchedule {
    pub first: u64,
    pub second: u64,
    pub every_from: u64,
}

impl Default for UpdateSchedule {
    fn default() -> Self {
        Self {
            first: 50,
            second: 75,
            every_from: 100,
        }
    }
}

impl UpdateSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.first >= 1 && self.first <= self.second && self.second <= self.every_from {
            Ok(())
        } else {
            Err(Error::invalid("update schedule needs 1 ≤ first ≤ second ≤ every_from"))
        }
    }

    pub fn is_update(&self, n: u64) -> bool {
        n == self.first || n == self.second || n >= self.every_from
    }
}

/// `s̃ ← s̃ + ϱ (s̄ − s̃)`
pub fn sa_update(running: &mut SuffStats, fresh: &SuffStats, step: f64) {
    if step == 1.0 {
        *running = fresh.clone();
        return;
    }
    running.scale(1.0 - step);
    running.add_scaled(step, fresh);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    #[serde(default)]
    pub step: StepSizeSchedule,
    #[serde(default)]
    pub updates: UpdateSchedule,
    pub mstep: MStepOptions,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.step.validate()?;
        self.updates.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: u64,
    pub step: f64,
    pub updated: bool,
    pub skipped: bool,
    #[serde(default)]
    pub skip_reason: Option<String>,
    pub frozen: Vec<usize>,
    pub acceptance_rate: Option<f64>,
    pub switch_rate: Option<f64>,
    pub pseudo_prior_fallbacks: usize,
    /// M-step objective at `θ̂_{n−1}` and `θ̂_n` on the current statistics.
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
}

/// Everything needed to continue a stream bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub n: u64,
    pub params: ModelParams,
    pub stats: Option<SuffStats>,
    /// Per-class proposal scales carried between chains.
    pub scales: Vec<f64>,
    pub updates: u64,
    pub history: Vec<IterationRecord>,
}

impl EngineState {
    pub fn new(params: ModelParams, initial_scale: f64) -> Result<Self> {
        params.validate()?;
        let c = params.num_classes();
        Ok(Self {
            n: 0,
            params,
            stats: None,
            scales: vec![initial_scale; c],
            updates: 0,
            history: Vec::new(),
        })
    }
}

/// One MCoEM iteration on observation `y`.
pub fn process_observation<E: EStep + ?Sized>(
    estep: &E,
    config: &EngineConfig,
    state: &mut EngineState,
    y: &Observation,
) -> Result<IterationRecord> {
    let n = state.n + 1;
    let step = config.step.step(n);
    let mut rng = stream_rng(config.seed, Purpose::Chain, n, 0);
    let mut scales = state.scales.clone();
    let mut record = IterationRecord {
        n,
        step,
        updated: false,
        skipped: false,
        skip_reason: None,
        frozen: Vec::new(),
        acceptance_rate: None,
        switch_rate: None,
        pseudo_prior_fallbacks: 0,
        objective_before: None,
        objective_after: None,
    };
    let out = match estep.expected_stats(&state.params, y, n, &mut scales, &mut rng) {
        Ok(out) => out,
        Err(e @ (Error::Dimension { .. } | Error::Config { .. })) => return Err(e),
        Err(e) => {
            log::warn!("iteration {n}: E-step failed, skipping: {e}");
            record.skipped = true;
            record.skip_reason = Some(e.to_string());
            state.n = n;
            state.history.push(record.clone());
            return Ok(record);
        }
    };
    state.n = n;
    state.scales = scales;
    if let Some(d) = &out.diagnostics {
        record.acceptance_rate = Some(d.acceptance_rate);
        record.switch_rate = Some(d.switch_rate);
    }
    record.pseudo_prior_fallbacks = out.pseudo_prior_fallbacks;
    match state.stats.as_mut() {
        Some(running) => sa_update(running, &out.stats, step),
        // the first accepted draw plays the role of ϱ_1 = 1
        None => state.stats = Some(out.stats.clone()),
    }
    if config.updates.is_update(n) {
        let stats = state.stats.as_ref().expect("set above");
        let grid_len = y.len();
        let before = stats_objective(&state.params, stats, grid_len)?;
        let outcome = m_step(stats, &state.params, grid_len, &config.mstep)?;
        let after = stats_objective(&outcome.params, stats, grid_len)?;
        if !outcome.frozen.is_empty() {
            log::info!("iteration {n}: frozen classes {:?}", outcome.frozen);
        }
        state.params = outcome.params;
        state.updates += 1;
        record.updated = true;
        record.frozen = outcome.frozen;
        record.objective_before = Some(before);
        record.objective_after = Some(after);
    }
    state.history.push(record.clone());
    Ok(record)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamLimits {
    pub max_observations: Option<u64>,
    pub budget: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Exhausted,
    ObservationLimit,
    Budget,
}

/// Feeds observations to [`process_observation`] one at a time. The hook
/// runs after every iteration with the updated state.
pub fn run_stream<E, I, H>(
    estep: &E,
    config: &EngineConfig,
    state: &mut EngineState,
    source: I,
    limits: StreamLimits,
    mut hook: H,
) -> Result<StopReason>
where
    E: EStep + ?Sized,
    I: IntoIterator<Item = Observation>,
    H: FnMut(&EngineState, &IterationRecord) -> Result<()>,
{
    config.validate()?;
    let start = Instant::now();
    let mut processed = 0u64;
    for y in source {
        if limits.max_observations.is_some_and(|m| processed >= m) {
            return Ok(StopReason::ObservationLimit);
        }
        if limits.budget.is_some_and(|b| start.elapsed() >= b) {
            return Ok(StopReason::Budget);
        }
        let record = process_observation(estep, config, state, &y)?;
        processed += 1;
        hook(state, &record)?;
    }
    Ok(StopReason::Exhausted)
}
