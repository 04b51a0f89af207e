//! Mixtures of deformable templates for curves and images, fitted online by
//! Monte Carlo EM with a Carlin–Chib sampler for the E-step.
//!
//! The main entry points are [`engine::run_stream`] for the online fit,
//! [`engine::saem_batch`] for the batch baseline and
//! [`classifier::classify`] for prediction.

pub mod classifier;
pub mod deformation;
pub mod engine;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sampler;

pub use classifier::{ClassMapping, McBudget, Prediction};
pub use deformation::{DeformationModel, DesignGrid, KernelDictionary, Warp};
pub use engine::{
    CarlinChibEStep, EStep, EngineConfig, EngineState, IterationRecord, MStepOptions, StepSizeSchedule,
    UpdateSchedule,
};
pub use error::{Error, Result};
pub use model::{ClassParams, HiddenState, ModelParams, Observation, SuffStats};
pub use rng::{stream_rng, Purpose, StreamRng};
pub use sampler::{ChainDiagnostics, SamplerConfig};
