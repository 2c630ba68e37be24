//! Adam and the offline training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::elbo::{envi_elbo, ElboOptions, ElboRun, TransitionSpec};
use super::noise::ROUND_EVAL;
use super::params::{init_trainer, GpssmParams, TrainerState, VariationalParams};
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they survive checkpointing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: usize,
    first: BTreeMap<String, DMatrix<f64>>,
    second: BTreeMap<String, DMatrix<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Descend one parameter along its loss gradient.
    pub fn apply(&mut self, name: &str, value: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        let (rows, cols) = value.shape();
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| DMatrix::zeros(rows, cols));
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| DMatrix::zeros(rows, cols));
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// One training-iteration record.
#[derive(Debug, Clone, Serialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub elbo: f64,
    pub loglik: f64,
    pub kl_x0: f64,
    pub kl_u: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub state: TrainerState,
    pub history: Vec<HistoryRow>,
}

/// Offline training: iterate bound evaluation, BPTT, and a joint Adam step
/// on model and variational parameters.
pub fn train_envi(cfg: &ModelConfig, c: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<TrainOutcome> {
    let state = init_trainer(cfg, c, y)?;
    train_from(state, cfg, y, cfg.iterations)
}

/// Continue training an existing state for `iterations` more steps.
pub fn train_from(
    mut state: TrainerState,
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    iterations: usize,
) -> Result<TrainOutcome> {
    let mut history = Vec::with_capacity(iterations);
    let mut first_elbo = None;
    for _ in 0..iterations {
        let started = Instant::now();
        let round = state.iteration as u64;
        let run = envi_elbo(
            &state.params,
            &state.varparams,
            cfg,
            y,
            state.seed,
            round,
            &TransitionSpec::Gp,
            ElboOptions::default(),
        )?;
        let b = run.breakdown;
        if !b.elbo.is_finite() {
            return Err(Error::NonFinite {
                context: format!("ELBO at iteration {}", state.iteration),
            });
        }
        let first = *first_elbo.get_or_insert(b.elbo);
        if b.elbo < first - 10.0 * first.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "training diverged at iteration {}: elbo {:.4} from initial {:.4}",
                state.iteration, b.elbo, first
            )));
        }
        let mut tape = run.tape.expect("attached mode");
        let loss = tape.scale(run.elbo_node.expect("attached mode"), -1.0);
        let grads = tape.backward(loss)?;
        state.adam_update(cfg, &grads);
        state.iteration += 1;
        history.push(HistoryRow {
            iteration: state.iteration,
            elbo: b.elbo,
            loglik: b.loglik_sum,
            kl_x0: b.kl_x0,
            kl_u: b.kl_u,
            grad_norm: grads.norm(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { state, history })
}

/// Detached filtering pass with the variational mean `u = m`; the source of
/// state estimates for a trained model.
pub fn filter_states(
    params: &GpssmParams,
    varparams: &VariationalParams,
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
) -> Result<ElboRun> {
    envi_elbo(
        params,
        varparams,
        cfg,
        y,
        cfg.seed,
        ROUND_EVAL,
        &TransitionSpec::Gp,
        ElboOptions {
            detach: true,
            u_mean: true,
        },
    )
}
