//! Fixtures shared by the benchmarks.

use mcoem_core::io::{random_truth, Mode, RunConfig};
use mcoem_core::model::sample_generative;
use mcoem_core::{stream_rng, DeformationModel, ModelParams, Observation, Purpose, Result};

pub struct Fixture {
    pub config: RunConfig,
    pub model: DeformationModel,
    pub truth: ModelParams,
    pub observations: Vec<Observation>,
}

impl Fixture {
    pub fn new(mode: Mode, count: usize) -> Result<Self> {
        let text = match mode {
            Mode::Curve => "mode = \"curve\"\n",
            Mode::Image => "mode = \"image\"\n",
        };
        let config = RunConfig::from_toml_str(text)?;
        let model = config.build_model(config.default_grid()?)?;
        let truth = random_truth(&config, &model)?;
        let mut rng = stream_rng(7, Purpose::Synthetic, 0, 0);
        let observations = (0..count)
            .map(|_| sample_generative(&truth, &model, &mut rng).map(|(_, y)| y))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            model,
            truth,
            observations,
        })
    }
}
