//! Versioned JSON checkpoints of the online engine.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::deformation::DesignGrid;
use crate::engine::EngineState;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Random streams are keyed by `(seed, n)`, so the next iteration index is
/// the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub created_unix_secs: f64,
    /// Fit wall-clock time accumulated over all sessions.
    pub elapsed_secs: f64,
    pub config: RunConfig,
    pub grid: DesignGrid,
    pub rng: RngCursor,
    pub state: EngineState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, grid: DesignGrid, state: EngineState, elapsed_secs: f64) -> Self {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        Self {
            format_version: CHECKPOINT_VERSION,
            created_unix_secs: created,
            elapsed_secs,
            rng: RngCursor {
                seed: config.seed,
                next_iteration: state.n + 1,
            },
            config,
            grid,
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("no format version: {e}")))?;
        if v.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                v.format_version
            )));
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let c: Checkpoint = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Checkpoint(format!("at `{}`: {}", e.path(), e.inner())))?;
        if c.rng.next_iteration != c.state.n + 1 || c.rng.seed != c.config.seed {
            return Err(Error::Checkpoint("rng cursor disagrees with the engine state".into()));
        }
        Ok(c)
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
