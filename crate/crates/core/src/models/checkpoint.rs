//! Self-describing JSON checkpoints. Values serialize through the shortest
//! round-tripping decimal form, so save/load reproduces every f64 bit.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{GpssmParams, TrainerState, VariationalParams};
use super::train::Adam;
use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: usize,
    pub seed: u64,
    pub params: GpssmParams,
    pub varparams: VariationalParams,
    pub optimizer: Adam,
    /// Online runs persist the filtered ensemble and time index.
    pub online_t: Option<usize>,
    pub ensemble: Option<DMatrix<f64>>,
}

impl Checkpoint {
    pub fn from_trainer(state: &TrainerState, config: &ModelConfig) -> Self {
        Checkpoint {
            config: config.clone(),
            iteration: state.iteration,
            seed: state.seed,
            params: state.params.clone(),
            varparams: state.varparams.clone(),
            optimizer: state.optimizer.clone(),
            online_t: None,
            ensemble: None,
        }
    }

    pub fn into_trainer(self) -> TrainerState {
        TrainerState {
            params: self.params,
            varparams: self.varparams,
            optimizer: self.optimizer,
            iteration: self.iteration,
            seed: self.seed,
        }
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ck)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
