//! TOML run configuration. Every section is optional; unknown keys are
//! rejected and reported with their field path.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassMapping, McBudget};
use crate::deformation::{
    CurveWarpModel, DeformationModel, DesignGrid, ImageDeformModel, KernelDictionary, Warp, RIGID_DIM,
};
use crate::engine::{CovarianceStructure, EngineConfig, MStepOptions, StepSizeSchedule, UpdateSchedule};
use crate::error::{Error, Result};
use crate::model::{ClassParams, ModelParams};
use crate::sampler::{ChainSchedule, PseudoPriorMode, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Curve,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub curve: CurveSection,
    #[serde(default)]
    pub image: ImageSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub sampler: SamplerOverrides,
    #[serde(default)]
    pub stream: StreamSection,
    #[serde(default)]
    pub saem: SaemSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub diag: DiagSection,
    #[serde(default)]
    pub render: RenderSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub classes: usize,
    /// Initial noise variance.
    pub sigma2: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub scale_enabled: bool,
    /// Defaults to `true` for curves and `false` for images.
    pub nonnegative_templates: Option<bool>,
    /// Initial `γ²` of every deformation covariance.
    pub initial_gamma2: f64,
    /// Defaults to isotropic for curves and the rigid-plus-tridiagonal
    /// structure for images.
    pub covariance: Option<CovarianceStructure>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            classes: 2,
            sigma2: 0.1,
            gamma_a: 10.0,
            gamma_b: 10.0,
            scale_enabled: true,
            nonnegative_templates: None,
            initial_gamma2: 0.1,
            covariance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub domain: (f64, f64),
    pub extended: (f64, f64),
    pub templates: usize,
    /// Kernel value at the nearest design point, which fixes each template
    /// bandwidth.
    pub epsilon: f64,
    /// Common template bandwidth; replaces the `epsilon` rule when set.
    pub template_bandwidth: Option<f64>,
    pub warp_kernels: usize,
    pub warp_bandwidth: f64,
    /// Every coordinate of the prior mean of `β`.
    pub prior_mean: f64,
    pub quadrature_nodes: usize,
    /// Design points for generated data; defaults to `grid_points` regular
    /// points on `domain`. Ingested files carry their own grid.
    pub grid: Option<Vec<f64>>,
    pub grid_points: usize,
}

impl Default for CurveSection {
    fn default() -> Self {
        Self {
            domain: (2.0, 18.0),
            extended: (0.0, 20.0),
            templates: 35,
            epsilon: 0.1,
            template_bandwidth: None,
            warp_kernels: 20,
            warp_bandwidth: 1.0,
            prior_mean: 1.0,
            quadrature_nodes: crate::deformation::DEFAULT_QUADRATURE_NODES,
            grid: None,
            grid_points: 31,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSection {
    pub side: usize,
    /// Template kernels sit on a `template_side²` vertex grid over `[−1, 1]²`.
    pub template_side: usize,
    /// Defaults to the squared spacing of the template grid.
    pub template_bandwidth: Option<f64>,
    pub local_side: usize,
    pub local_bandwidth: f64,
    pub rigid_variance: f64,
    pub off_diagonal: f64,
    /// Ingestion noise `σ`; `None` leaves the pixels untouched.
    pub noise_sigma: Option<f64>,
}

impl Default for ImageSection {
    fn default() -> Self {
        Self {
            side: 16,
            template_side: 16,
            template_bandwidth: None,
            local_side: 6,
            local_bandwidth: 0.16,
            rigid_variance: 0.01,
            off_diagonal: 0.2,
            noise_sigma: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Curve CSV file, or image file/directory.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Labeled data used to propose a component-to-label mapping.
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Kmeans,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub kind: InitKind,
    /// Observations handed to k-means.
    pub sample: usize,
    pub kmeans_iterations: usize,
    /// Upper bound of the uniform coefficients used by `random`.
    pub random_amplitude: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            kind: InitKind::Kmeans,
            sample: 50,
            kmeans_iterations: 100,
            random_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub step_exponent: f64,
    pub updates: UpdateSchedule,
    pub ridge: f64,
    pub weight_floor: f64,
    pub gamma_floor: f64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let m = MStepOptions::default();
        Self {
            step_exponent: StepSizeSchedule::default().exponent,
            updates: UpdateSchedule::default(),
            ridge: m.ridge,
            weight_floor: m.weight_floor,
            gamma_floor: m.gamma_floor,
        }
    }
}

/// Any field left out keeps the mode default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerOverrides {
    pub schedule: Option<ChainSchedule>,
    pub burn_in: Option<usize>,
    pub inner_steps: Option<usize>,
    pub target_acceptance: Option<f64>,
    pub initial_scale: Option<f64>,
    pub adapt: Option<bool>,
    pub pseudo_prior: Option<PseudoPriorMode>,
    pub rw_moment_steps: Option<usize>,
    pub optimizer_max_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceOrder {
    /// Observation `n` is row `(n − 1) mod N`.
    Sequential,
    /// Observation `n` is a uniform draw keyed by `n`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub order: SourceOrder,
    /// Total iterations; defaults to one pass over the data.
    pub iterations: Option<u64>,
    /// Write a checkpoint every this many parameter updates.
    pub checkpoint_every: u64,
    /// Record `θ̂` in the trajectory every this many parameter updates.
    pub trajectory_every: u64,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            order: SourceOrder::Sequential,
            iterations: None,
            checkpoint_every: 1,
            trajectory_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaemSection {
    pub max_iterations: Option<u64>,
    pub parallel: bool,
}

impl Default for SaemSection {
    fn default() -> Self {
        Self {
            max_iterations: Some(20),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    /// JSON `ModelParams`; when absent a random truth is drawn from
    /// `truth_seed`.
    pub truth: Option<PathBuf>,
    pub truth_seed: u64,
    /// Noise variance of the generated truth.
    pub sigma2: f64,
    pub gamma2: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            count: 100,
            truth: None,
            truth_seed: 0,
            sigma2: 0.0025,
            gamma2: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ClassifySection {
    /// Label of each component; absent means identity, or majority vote
    /// when calibration data is given.
    pub mapping: Option<Vec<usize>>,
    pub num_labels: Option<usize>,
    pub budget: McBudget,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSection {
    pub observations: usize,
}

impl Default for DiagSection {
    fn default() -> Self {
        Self { observations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub image_side: usize,
    /// Regular raster over the curve domain; the design grid when absent.
    pub curve_points: Option<usize>,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            image_side: super::render::DEFAULT_IMAGE_RASTER,
            curve_points: None,
        }
    }
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e.to_string()))?;
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.classes == 0 {
            return Err(config_err("model.classes", "must be at least 1"));
        }
        if !(m.sigma2.is_finite() && m.sigma2 > 0.0) {
            return Err(config_err("model.sigma2", "must be positive"));
        }
        if !(m.gamma_a > 0.0 && m.gamma_b > 0.0) {
            return Err(config_err("model.gamma_a", "Gamma prior parameters must be positive"));
        }
        if !(m.initial_gamma2 > 0.0) {
            return Err(config_err("model.initial_gamma2", "must be positive"));
        }
        match self.mode {
            Mode::Curve => {
                let c = &self.curve;
                let (ui, uf) = c.domain;
                let (ei, ef) = c.extended;
                if !(ei <= ui && ui < uf && uf <= ef) {
                    return Err(config_err("curve.extended", "must contain curve.domain"));
                }
                if c.templates == 0 || c.warp_kernels == 0 {
                    return Err(config_err("curve.templates", "dictionaries must be nonempty"));
                }
                if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
                    return Err(config_err("curve.epsilon", "must lie in (0, 1)"));
                }
                if c.template_bandwidth.is_some_and(|b| !(b > 0.0)) {
                    return Err(config_err("curve.template_bandwidth", "must be positive"));
                }
                if !(c.warp_bandwidth > 0.0) {
                    return Err(config_err("curve.warp_bandwidth", "must be positive"));
                }
                if let Some(g) = &c.grid {
                    if g.len() < 2 {
                        return Err(config_err("curve.grid", "needs at least two points"));
                    }
                }
            }
            Mode::Image => {
                let i = &self.image;
                if i.side == 0 || i.template_side < 2 || i.local_side == 0 {
                    return Err(config_err("image.side", "raster and dictionary sides must be positive"));
                }
                if !(i.local_bandwidth > 0.0) {
                    return Err(config_err("image.local_bandwidth", "must be positive"));
                }
                if i.template_bandwidth.is_some_and(|b| !(b > 0.0)) {
                    return Err(config_err("image.template_bandwidth", "must be positive"));
                }
                if !(i.rigid_variance > 0.0) {
                    return Err(config_err("image.rigid_variance", "must be positive"));
                }
                if i.noise_sigma.is_some_and(|s| !(s >= 0.0)) {
                    return Err(config_err("image.noise_sigma", "must be nonnegative"));
                }
            }
        }
        if self.init.sample == 0 {
            return Err(config_err("init.sample", "must be at least 1"));
        }
        if self.stream.checkpoint_every == 0 {
            return Err(config_err("stream.checkpoint_every", "must be at least 1"));
        }
        if self.stream.trajectory_every == 0 {
            return Err(config_err("stream.trajectory_every", "must be at least 1"));
        }
        if self.render.image_side == 0 || self.render.curve_points.is_some_and(|n| n < 2) {
            return Err(config_err("render", "raster must have at least two points"));
        }
        self.engine_config()
            .validate()
            .map_err(|e| config_err("engine", e.to_string()))?;
        self.sampler_config()
            .validate()
            .map_err(|e| config_err("sampler", e.to_string()))?;
        if let Some(map) = &self.classify.mapping {
            if map.len() != m.classes {
                return Err(config_err("classify.mapping", "needs one label per component"));
            }
            let labels = self.classify.num_labels.unwrap_or(map.iter().max().map_or(1, |x| x + 1));
            ClassMapping::new(map.clone(), labels).map_err(|e| config_err("classify.mapping", e.to_string()))?;
        }
        if self.classify.budget.samples == 0 {
            return Err(config_err("classify.budget.samples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn covariance(&self) -> CovarianceStructure {
        if let Some(c) = &self.model.covariance {
            return c.clone();
        }
        match self.mode {
            Mode::Curve => CovarianceStructure::Isotropic,
            Mode::Image => {
                let i = &self.image;
                CovarianceStructure::image(RIGID_DIM, i.local_side * i.local_side, i.rigid_variance, i.off_diagonal)
            }
        }
    }

    pub fn mstep_options(&self) -> MStepOptions {
        MStepOptions {
            covariance: self.covariance(),
            ridge: self.engine.ridge,
            weight_floor: self.engine.weight_floor,
            gamma_floor: self.engine.gamma_floor,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            seed: self.seed,
            step: StepSizeSchedule {
                exponent: self.engine.step_exponent,
            },
            updates: self.engine.updates,
            mstep: self.mstep_options(),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let mut s = match self.mode {
            Mode::Curve => SamplerConfig::curve_defaults(),
            Mode::Image => SamplerConfig::image_defaults(),
        };
        let o = &self.sampler;
        if let Some(v) = &o.schedule {
            s.schedule = *v;
        }
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { s.$f = v; } )* };
        }
        apply!(burn_in, inner_steps, target_acceptance, initial_scale, adapt, pseudo_prior, rw_moment_steps, optimizer_max_iter);
        s
    }

    pub fn nonnegative_templates(&self) -> bool {
        self.model
            .nonnegative_templates
            .unwrap_or(self.mode == Mode::Curve)
    }

    /// Design grid used when no data file supplies one.
    pub fn default_grid(&self) -> Result<DesignGrid> {
        match self.mode {
            Mode::Curve => match &self.curve.grid {
                Some(g) => DesignGrid::line(g.clone()),
                None => DesignGrid::regular_line(self.curve.domain.0, self.curve.domain.1, self.curve.grid_points),
            },
            Mode::Image => DesignGrid::pixel_grid(self.image.side),
        }
    }

    /// Template dictionary and deformation family on `grid`.
    pub fn build_model(&self, grid: DesignGrid) -> Result<DeformationModel> {
        match self.mode {
            Mode::Curve => {
                let c = &self.curve;
                if !grid.within(c.domain.0, c.domain.1) {
                    return Err(config_err("curve.domain", "design points fall outside the domain"));
                }
                let templates = match c.template_bandwidth {
                    Some(bw) => KernelDictionary::regular_line(c.domain.0, c.domain.1, c.templates, bw)?,
                    None => KernelDictionary::nearest_point_line(c.domain.0, c.domain.1, c.templates, &grid, c.epsilon)?,
                };
                let warp = CurveWarpModel::regular(c.domain, c.extended, c.warp_kernels, c.warp_bandwidth, c.quadrature_nodes)?;
                DeformationModel::new(templates, Warp::Curve(warp), grid)
            }
            Mode::Image => {
                let i = &self.image;
                crate::error::check_dim("image grid size", i.side * i.side, grid.len())?;
                let spacing = 2.0 / (i.template_side - 1) as f64;
                let bw = i.template_bandwidth.unwrap_or(spacing * spacing);
                let templates = KernelDictionary::regular_square(-1.0, 1.0, i.template_side, bw)?;
                let warp = ImageDeformModel::regular(i.local_side, i.local_bandwidth)?;
                DeformationModel::new(templates, Warp::Image(warp), grid)
            }
        }
    }

    pub fn beta_prior_mean(&self, model: &DeformationModel) -> DVector<f64> {
        match self.mode {
            Mode::Curve => DVector::from_element(model.beta_dim(), self.curve.prior_mean),
            Mode::Image => model.reference_beta(),
        }
    }

    /// Parameters with the given templates, equal weights and the
    /// configured initial variances.
    pub fn params_with_templates(&self, model: &DeformationModel, alphas: Vec<DVector<f64>>, sigma2: f64, gamma2: f64) -> Result<ModelParams> {
        let d = model.beta_dim();
        let gamma = self.covariance().assemble(d, gamma2);
        let w = 1.0 / alphas.len() as f64;
        let params = ModelParams {
            classes: alphas
                .into_iter()
                .map(|alpha| ClassParams {
                    alpha,
                    gamma: gamma.clone(),
                    weight: w,
                })
                .collect(),
            sigma2,
            gamma_a: self.model.gamma_a,
            gamma_b: self.model.gamma_b,
            beta_prior_mean: self.beta_prior_mean(model),
            scale_enabled: self.model.scale_enabled,
            nonnegative_templates: self.nonnegative_templates(),
        };
        params.validate()?;
        Ok(params)
    }
}
