use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mcoem_core::classifier::{
    classify, live_error_rate, majority_vote_mapping, write_error_table, ClassMapping,
};
use mcoem_core::engine::{run_stream, saem_batch, SaemConfig, StopReason, StreamLimits};
use mcoem_core::io::{
    append_trajectory, generate_synthetic, initial_params, load_dataset, random_truth, read_json,
    read_trajectory, render_curves, render_images, stream_source, write_json, Checkpoint, Dataset, Layout,
    Mode, RunConfig, TrajectoryPoint,
};
use mcoem_core::sampler::{sample_posterior, PseudoPriorReport};
use mcoem_core::{
    stream_rng, CarlinChibEStep, ChainDiagnostics, DesignGrid, EngineState, Error, ModelParams, Purpose,
    Result,
};
use serde::Serialize;

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub budget: Option<Duration>,
    pub mc_budget: Option<usize>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Context {
    fn dataset(&mut self, path: Option<PathBuf>, field: &str, role: u64) -> Result<Dataset> {
        let path = path.ok_or_else(|| config_err(field, "a path is required for this command"))?;
        let d = load_dataset(&self.config, &path, role)?;
        self.inputs.push(path);
        Ok(d)
    }

    fn checkpoint(&mut self) -> Result<Checkpoint> {
        let path = self
            .resume
            .clone()
            .ok_or_else(|| Error::Checkpoint("this command needs --resume <checkpoint>".into()))?;
        let cp = Checkpoint::load(&path)?;
        self.inputs.push(path);
        if cp.config.mode != self.config.mode {
            return Err(Error::Checkpoint("checkpoint was written for a different mode".into()));
        }
        Ok(cp)
    }

    fn out_file(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn open_jsonl(&mut self, name: &str, append: bool) -> Result<BufWriter<File>> {
        let p = self.out_file(name);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&p)
            .map_err(io_err(&p))?;
        Ok(BufWriter::new(f))
    }
}

fn jsonl<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    writeln!(w, "{line}").map_err(io_err(Path::new("jsonl")))
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Exhausted => "exhausted",
        StopReason::ObservationLimit => "iteration_limit",
        StopReason::Budget => "budget",
    }
}

#[derive(Serialize)]
struct FitSummary {
    stop: &'static str,
    iterations: u64,
    updates: u64,
    skipped: usize,
    elapsed_secs: f64,
}

pub fn fit(ctx: &mut Context) -> Result<()> {
    let data = ctx.dataset(ctx.config.data.train.clone(), "data.train", 0)?;
    if data.observations.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    let config = ctx.config.clone();
    let model = config.build_model(data.grid.clone())?;
    let sampler = config.sampler_config();
    let (mut state, elapsed0, resumed) = match &ctx.resume {
        Some(_) => {
            let cp = ctx.checkpoint()?;
            if cp.grid != data.grid {
                return Err(Error::Checkpoint("checkpoint grid differs from the training data grid".into()));
            }
            if cp.config.seed != config.seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint seed {} differs from run seed {}",
                    cp.config.seed, config.seed
                )));
            }
            (cp.state, cp.elapsed_secs, true)
        }
        None => {
            let init = initial_params(&config, &model, &data.observations)?;
            (EngineState::new(init, sampler.initial_scale)?, 0.0, false)
        }
    };
    let total = config.stream.iterations.unwrap_or(data.observations.len() as u64);
    let remaining = total.saturating_sub(state.n);
    let estep = CarlinChibEStep::new(model, sampler)?;
    let engine = config.engine_config();

    let mut trajectory = ctx.open_jsonl("trajectory.jsonl", resumed)?;
    let mut iterations = ctx.open_jsonl("iterations.jsonl", resumed)?;
    if !resumed {
        append_trajectory(
            &mut trajectory,
            &TrajectoryPoint {
                n: 0,
                elapsed_secs: 0.0,
                params: state.params.clone(),
            },
        )?;
    }
    let cp_path = ctx.out_file("checkpoint.json");
    let grid = data.grid.clone();
    let start = Instant::now();
    let mut updates = 0u64;
    let source = stream_source(&data.observations, config.stream.order, config.seed, state.n + 1, remaining);
    let stop = run_stream(
        &estep,
        &engine,
        &mut state,
        source,
        StreamLimits {
            max_observations: None,
            budget: ctx.budget,
        },
        |s, rec| {
            jsonl(&mut iterations, rec)?;
            if rec.updated {
                updates += 1;
                let elapsed = elapsed0 + start.elapsed().as_secs_f64();
                if updates.is_multiple_of(config.stream.trajectory_every) {
                    append_trajectory(
                        &mut trajectory,
                        &TrajectoryPoint {
                            n: s.n,
                            elapsed_secs: elapsed,
                            params: s.params.clone(),
                        },
                    )?;
                }
                if updates.is_multiple_of(config.stream.checkpoint_every) {
                    Checkpoint::new(config.clone(), grid.clone(), s.clone(), elapsed).save(&cp_path)?;
                }
            }
            Ok(())
        },
    )?;
    let elapsed = elapsed0 + start.elapsed().as_secs_f64();
    trajectory.flush().map_err(io_err(Path::new("trajectory.jsonl")))?;
    iterations.flush().map_err(io_err(Path::new("iterations.jsonl")))?;
    log::info!("fit stopped ({}) after {} iterations", stop_name(stop), state.n);
    let fallbacks: usize = state.history.iter().map(|r| r.pseudo_prior_fallbacks).sum();
    if fallbacks > 0 {
        log::warn!("{fallbacks} pseudo-prior constructions fell back to the class prior");
    }
    let summary = FitSummary {
        stop: stop_name(stop),
        iterations: state.n,
        updates: state.updates,
        skipped: state.history.iter().filter(|r| r.skipped).count(),
        elapsed_secs: elapsed,
    };
    Checkpoint::new(config, grid, state.clone(), elapsed).save(&cp_path)?;
    let p = ctx.out_file("params.json");
    write_json(&p, &state.params)?;
    let p = ctx.out_file("summary.json");
    write_json(&p, &summary)
}

#[derive(Serialize)]
struct BatchSummary {
    stop: &'static str,
    iterations: usize,
    iteration_secs: Vec<f64>,
    elapsed_secs: f64,
}

pub fn fit_batch(ctx: &mut Context) -> Result<()> {
    if ctx.resume.is_some() {
        return Err(Error::InvalidParameter("fit-batch does not resume from checkpoints".into()));
    }
    let data = ctx.dataset(ctx.config.data.train.clone(), "data.train", 0)?;
    let config = &ctx.config;
    let model = config.build_model(data.grid.clone())?;
    let sampler = config.sampler_config();
    let init = initial_params(config, &model, &data.observations)?;
    let saem = SaemConfig {
        seed: config.seed,
        step: config.engine_config().step,
        mstep: config.mstep_options(),
        max_iterations: config.saem.max_iterations,
        budget: ctx.budget,
        initial_scale: sampler.initial_scale,
        parallel: config.saem.parallel,
    };
    if saem.max_iterations.is_none() && saem.budget.is_none() {
        return Err(config_err("saem.max_iterations", "needs an iteration limit or --budget-seconds"));
    }
    let estep = CarlinChibEStep::new(model, sampler)?;
    let mut trajectory = ctx.open_jsonl("trajectory.jsonl", false)?;
    append_trajectory(
        &mut trajectory,
        &TrajectoryPoint {
            n: 0,
            elapsed_secs: 0.0,
            params: init.clone(),
        },
    )?;
    let run = saem_batch(&estep, &data.observations, init, &saem, |p| {
        append_trajectory(
            &mut trajectory,
            &TrajectoryPoint {
                n: p.iteration,
                elapsed_secs: p.elapsed_secs,
                params: p.params.clone(),
            },
        )
    })?;
    trajectory.flush().map_err(io_err(Path::new("trajectory.jsonl")))?;
    let p = ctx.out_file("params.json");
    write_json(&p, &run.params)?;
    let summary = BatchSummary {
        stop: stop_name(run.stop),
        iterations: run.trajectory.len(),
        iteration_secs: run.trajectory.iter().map(|p| p.iteration_secs).collect(),
        elapsed_secs: run.trajectory.last().map_or(0.0, |p| p.elapsed_secs),
    };
    let p = ctx.out_file("summary.json");
    write_json(&p, &summary)
}

pub fn generate(ctx: &mut Context) -> Result<()> {
    let config = ctx.config.clone();
    let model = config.build_model(config.default_grid()?)?;
    let truth: ModelParams = match &config.generate.truth {
        Some(p) => {
            ctx.inputs.push(p.clone());
            read_json(p)?
        }
        None => random_truth(&config, &model)?,
    };
    let layout = match config.mode {
        Mode::Curve => Layout::Curves,
        Mode::Image => Layout::Images {
            side: config.image.side,
        },
    };
    let mut rng = stream_rng(config.seed, Purpose::Synthetic, 0, 0);
    let g = generate_synthetic(&truth, &model, config.generate.count, layout, &ctx.out, &mut rng)?;
    ctx.artifacts.extend(g.files);
    Ok(())
}

fn read_params_source(ctx: &mut Context) -> Result<Vec<(f64, ModelParams)>> {
    let path = ctx
        .resume
        .clone()
        .ok_or_else(|| Error::Checkpoint("classify needs --resume <checkpoint or trajectory.jsonl>".into()))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        ctx.inputs.push(path.clone());
        let t = read_trajectory(&path)?;
        if t.is_empty() {
            return Err(Error::Checkpoint(format!("{} holds no parameters", path.display())));
        }
        Ok(t.into_iter().map(|p| (p.elapsed_secs, p.params)).collect())
    } else {
        let cp = ctx.checkpoint()?;
        Ok(vec![(cp.elapsed_secs, cp.state.params)])
    }
}

#[derive(Serialize)]
struct PredictionRow {
    index: usize,
    label: Option<usize>,
    predicted: usize,
    scores: Vec<f64>,
}

pub fn classify_cmd(ctx: &mut Context) -> Result<()> {
    let test = ctx.dataset(ctx.config.data.test.clone(), "data.test", 1)?;
    if test.observations.is_empty() {
        return Err(Error::InvalidParameter("test set is empty".into()));
    }
    let trajectory = read_params_source(ctx)?;
    let config = ctx.config.clone();
    let model = config.build_model(test.grid.clone())?;
    let mut budget = config.classify.budget;
    if let Some(n) = ctx.mc_budget {
        budget.samples = n;
    }
    let last = &trajectory.last().expect("nonempty").1;
    let labels_seen = test.observations.iter().filter_map(|o| o.label).max().map_or(1, |l| l + 1);
    let mapping = match (&config.classify.mapping, config.data.calibration.clone()) {
        (Some(m), _) => ClassMapping::new(m.clone(), config.classify.num_labels.unwrap_or(labels_seen.max(m.iter().max().map_or(1, |x| x + 1))))?,
        (None, Some(path)) => {
            let cal = ctx.dataset(Some(path), "data.calibration", 2)?;
            let seen = cal.observations.iter().filter_map(|o| o.label).max().map_or(1, |l| l + 1);
            let labels = config.classify.num_labels.unwrap_or(seen.max(labels_seen));
            majority_vote_mapping(last, &model, &cal.observations, labels, &budget, config.seed)?
        }
        (None, None) => ClassMapping::identity(last.num_classes()),
    };
    let points = live_error_rate(&trajectory, &model, &test.observations, &mapping, &budget, config.seed)?;
    let p = ctx.out_file("error_rate.csv");
    write_error_table(&points, File::create(&p).map_err(io_err(&p))?)?;
    let mut preds = ctx.open_jsonl("predictions.jsonl", false)?;
    for (k, y) in test.observations.iter().enumerate() {
        let pr = classify(last, &model, y, &mapping, &budget, config.seed ^ 0x5eed, k as u64)?;
        jsonl(
            &mut preds,
            &PredictionRow {
                index: k,
                label: y.label,
                predicted: pr.label,
                scores: pr.scores,
            },
        )?;
    }
    preds.flush().map_err(io_err(Path::new("predictions.jsonl")))?;
    let p = ctx.out_file("mapping.json");
    write_json(&p, &mapping)
}

pub fn render(ctx: &mut Context) -> Result<()> {
    let cp = ctx.checkpoint()?;
    let config = ctx.config.clone();
    let model = config.build_model(cp.grid.clone())?;
    let files = match config.mode {
        Mode::Curve => {
            let raster = match config.render.curve_points {
                Some(n) => DesignGrid::regular_line(config.curve.domain.0, config.curve.domain.1, n)?,
                None => cp.grid.clone(),
            };
            render_curves(&cp.state.params, &model.templates, &raster, &ctx.out)?
        }
        Mode::Image => render_images(&cp.state.params, &model.templates, config.render.image_side, &ctx.out)?.0,
    };
    ctx.artifacts.extend(files);
    Ok(())
}

#[derive(Serialize)]
struct DiagRecord {
    index: usize,
    label: Option<usize>,
    diagnostics: ChainDiagnostics,
    pseudo_priors: Vec<PseudoPriorReport>,
}

pub fn diag(ctx: &mut Context) -> Result<()> {
    let data = ctx.dataset(ctx.config.data.train.clone(), "data.train", 0)?;
    let config = ctx.config.clone();
    let model = config.build_model(data.grid.clone())?;
    let sampler = config.sampler_config();
    let (params, scales, n) = if ctx.resume.is_some() {
        let cp = ctx.checkpoint()?;
        (cp.state.params, cp.state.scales, cp.state.n + 1)
    } else {
        let p = initial_params(&config, &model, &data.observations)?;
        let c = p.num_classes();
        (p, vec![sampler.initial_scale; c], 1)
    };
    let mut out = ctx.open_jsonl("diagnostics.jsonl", false)?;
    for (k, y) in data.observations.iter().take(config.diag.observations).enumerate() {
        let mut rng = stream_rng(config.seed, Purpose::Chain, n, 1 + k as u64);
        let mut sc = scales.clone();
        let draws = sample_posterior(&params, &model, y, &sampler, n, &mut sc, &mut rng)?;
        jsonl(
            &mut out,
            &DiagRecord {
                index: k,
                label: y.label,
                diagnostics: draws.diagnostics,
                pseudo_priors: draws.pseudo_priors,
            },
        )?;
    }
    out.flush().map_err(io_err(Path::new("diagnostics.jsonl")))
}
