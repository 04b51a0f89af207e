//! Batch MCMC-SAEM: every iteration revisits the whole dataset.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estep::EStep;
use super::mstep::{m_step, MStepOptions};
use super::{sa_update, StepSizeSchedule, StopReason};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Observation, SuffStats};
use crate::rng::{stream_rng, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct SaemConfig {
    pub seed: u64,
    pub step: StepSizeSchedule,
    pub mstep: MStepOptions,
    pub max_iterations: Option<u64>,
    pub budget: Option<Duration>,
    pub initial_scale: f64,
    /// Fan observations out over the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaemPoint {
    pub iteration: u64,
    /// Wall-clock seconds since the start of the run, at the end of the
    /// iteration.
    pub elapsed_secs: f64,
    pub iteration_secs: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct SaemRun {
    pub trajectory: Vec<SaemPoint>,
    pub params: ModelParams,
    pub stats: Option<SuffStats>,
    pub stop: StopReason,
}

/// Runs SAEM until `max_iterations` or until the wall-clock budget is spent
/// (an iteration that has started always completes).
///
/// Observation `i` at iteration `k` draws from its own keyed stream, and
/// per-observation statistics are summed in dataset order, so results do not
/// depend on `parallel`.
pub fn saem_batch<E, H>(
    estep: &E,
    dataset: &[Observation],
    init: ModelParams,
    config: &SaemConfig,
    mut hook: H,
) -> Result<SaemRun>
where
    E: EStep + ?Sized,
    H: FnMut(&SaemPoint) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::invalid("SAEM needs a nonempty dataset"));
    }
    config.step.validate()?;
    init.validate()?;
    let c = init.num_classes();
    let grid_len = dataset[0].len();
    let mut scales = vec![vec![config.initial_scale; c]; dataset.len()];
    let mut params = init;
    let mut running: Option<SuffStats> = None;
    let mut trajectory = Vec::new();
    let start = Instant::now();
    let mut k = 0u64;
    let stop = loop {
        if config.max_iterations.is_some_and(|m| k >= m) {
            break StopReason::ObservationLimit;
        }
        if config.budget.is_some_and(|b| start.elapsed() >= b) {
            break StopReason::Budget;
        }
        k += 1;
        let t0 = Instant::now();
        let job = |(i, (y, sc)): (usize, (&Observation, &mut Vec<f64>))| {
            let mut rng = stream_rng(config.seed, Purpose::Chain, k, i as u64);
            estep
                .expected_stats(&params, y, k, sc, &mut rng)
                .map(|o| o.stats)
        };
        let per_obs: Vec<Result<SuffStats>> = if config.parallel {
            dataset
                .par_iter()
                .zip(scales.par_iter_mut())
                .enumerate()
                .map(job)
                .collect()
        } else {
            dataset.iter().zip(scales.iter_mut()).enumerate().map(job).collect()
        };
        let mut mean = SuffStats::for_params(&params);
        let w = 1.0 / dataset.len() as f64;
        for s in per_obs {
            mean.add_scaled(w, &s?);
        }
        match running.as_mut() {
            Some(r) => sa_update(r, &mean, config.step.step(k)),
            None => running = Some(mean),
        }
        let outcome = m_step(running.as_ref().expect("set above"), &params, grid_len, &config.mstep)?;
        params = outcome.params;
        let point = SaemPoint {
            iteration: k,
            elapsed_secs: start.elapsed().as_secs_f64(),
            iteration_secs: t0.elapsed().as_secs_f64(),
            params: params.clone(),
        };
        hook(&point)?;
        trajectory.push(point);
    };
    Ok(SaemRun {
        trajectory,
        params,
        stats: running,
        stop,
    })
}
