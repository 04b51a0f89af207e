//! Files and configuration around the algorithms.

mod checkpoint;
mod config;
mod data;
mod init;
mod render;

pub use checkpoint::{Checkpoint, RngCursor, CHECKPOINT_VERSION};
pub use config::{
    ClassifySection, CurveSection, DataSection, DiagSection, EngineSection, GenerateSection, ImageSection,
    InitKind, InitSection, Mode, ModelSection, RenderSection, RunConfig, SaemSection, SamplerOverrides, SourceOrder,
    StreamSection,
};
pub use data::{
    fmt_f64, generate_synthetic, ingest_curves, ingest_images, read_json, read_raster, write_curves, write_json,
    write_pgm, write_raster_csv, Dataset, Generated, Layout, NoiseSpec, TruthRecord, TruthSidecar, LABELS_FILE,
    LABEL_COLUMN,
};
pub use init::{kmeans, kmeans_init, project_on_basis, random_init, KMeans};
pub use render::{
    normalize, render_curves, render_images, render_template, Normalization, RenderEntry, RenderSidecar,
    DEFAULT_IMAGE_RASTER,
};

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationModel;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Observation};
use crate::rng::{stream_rng, Purpose};

/// Dataset row fed to iteration `n` (1-based).
pub fn source_index(order: SourceOrder, seed: u64, n: u64, len: usize) -> usize {
    match order {
        SourceOrder::Sequential => ((n - 1) % len as u64) as usize,
        SourceOrder::Random => stream_rng(seed, Purpose::Source, n, 0).random_range(0..len),
    }
}

/// Observations for iterations `first..first + count`.
pub fn stream_source(
    data: &[Observation],
    order: SourceOrder,
    seed: u64,
    first: u64,
    count: u64,
) -> impl Iterator<Item = Observation> + '_ {
    (first..first + count).map(move |n| data[source_index(order, seed, n, data.len())].clone())
}

/// One line of a parameter trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub n: u64,
    pub elapsed_secs: f64,
    pub params: ModelParams,
}

pub fn append_trajectory<W: Write>(out: &mut W, point: &TrajectoryPoint) -> Result<()> {
    let line = serde_json::to_string(point).map_err(|e| Error::invalid(format!("trajectory: {e}")))?;
    writeln!(out, "{line}").map_err(|e| Error::io("trajectory", e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Starting parameters for a fit: k-means on a random subset of `data`
/// (stream `(seed, Init, 0, 0)`) or random coefficients (stream
/// `(seed, Init, 1, 0)`).
pub fn initial_params(config: &RunConfig, model: &DeformationModel, data: &[Observation]) -> Result<ModelParams> {
    let c = config.model.classes;
    let alphas = match config.init.kind {
        InitKind::Kmeans => {
            let mut rng = stream_rng(config.seed, Purpose::Init, 0, 0);
            let k = config.init.sample.min(data.len());
            let picks = rand::seq::index::sample(&mut rng, data.len(), k).into_vec();
            let sample: Vec<Observation> = picks.iter().map(|&i| data[i].clone()).collect();
            let (alphas, km) = kmeans_init(
                &sample,
                c,
                model,
                config.init.kmeans_iterations,
                config.nonnegative_templates(),
                &mut rng,
            )?;
            log::info!("k-means: {} iterations, {} reseeds", km.iterations, km.reseeded);
            alphas
        }
        InitKind::Random => {
            let mut rng = stream_rng(config.seed, Purpose::Init, 1, 0);
            random_init(c, model.num_basis(), config.init.random_amplitude, &mut rng)
        }
    };
    config.params_with_templates(model, alphas, config.model.sigma2, config.model.initial_gamma2)
}

/// Generating parameters drawn from `generate.truth_seed` when no truth file
/// is configured.
pub fn random_truth(config: &RunConfig, model: &DeformationModel) -> Result<ModelParams> {
    let mut rng = stream_rng(config.generate.truth_seed, Purpose::Synthetic, 0, 1);
    let alphas = random_init(config.model.classes, model.num_basis(), config.init.random_amplitude, &mut rng);
    config.params_with_templates(model, alphas, config.generate.sigma2, config.generate.gamma2)
}

/// Reads a curve table or image set according to `config.mode`. `role`
/// separates the ingestion noise streams of different files.
pub fn load_dataset(config: &RunConfig, path: &Path, role: u64) -> Result<Dataset> {
    match config.mode {
        Mode::Curve => ingest_curves(path),
        Mode::Image => {
            let noise = config.image.noise_sigma.map(|sigma| NoiseSpec {
                sigma,
                seed: config.seed,
                role,
            });
            ingest_images(path, config.image.side, noise)
        }
    }
}
