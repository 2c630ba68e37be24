//! Run configuration shared by training, online learning and the CLI.

use serde::{Deserialize, Serialize};

use crate::enkf::Eq27Mode;
use crate::gp::{GaussianBelief, InducingNoise};

/// Everything a training or filtering run needs to be reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_y: usize,
    /// Number of inducing points M.
    pub num_inducing: usize,
    /// Ensemble size N.
    pub num_particles: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Diagonal regularizer added to the ensemble sample covariance.
    pub lambda_ens: f64,
    /// Base jitter for covariance factorizations.
    pub jitter: f64,
    /// Observation-likelihood covariance variant.
    pub eq27: Eq27Mode,
    /// Gram-matrix regularization mode inside the transition conditional.
    pub inducing_noise: InducingNoise,
    /// Monte Carlo samples of u per bound evaluation.
    pub u_samples: usize,
    /// Parameter updates per time step in the online algorithm.
    pub k_inner: usize,
    pub learn_r: bool,
    pub learn_q: bool,
    pub learn_x0: bool,
    pub init_lengthscale: f64,
    pub init_signal_variance: f64,
    /// Initial Q and R diagonal value.
    pub init_noise_variance: f64,
    /// Fix the emission-noise diagonal to these variances (disables learn_r).
    pub fixed_r: Option<Vec<f64>>,
    /// Detach the rollout every this many steps (full-sequence BPTT if None).
    pub bptt_truncation: Option<usize>,
    /// Prior over the initial state; N(0, I) if absent.
    pub p0: Option<GaussianBelief>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_x: 1,
            d_y: 1,
            num_inducing: 15,
            num_particles: 50,
            iterations: 500,
            learning_rate: 0.01,
            seed: 0,
            lambda_ens: 1e-6,
            jitter: 1e-6,
            eq27: Eq27Mode::WithR,
            inducing_noise: InducingNoise::Process,
            u_samples: 1,
            k_inner: 1,
            learn_r: true,
            learn_q: true,
            learn_x0: true,
            init_lengthscale: 1.0,
            init_signal_variance: 1.0,
            init_noise_variance: 0.1,
            fixed_r: None,
            bptt_truncation: None,
            p0: None,
        }
    }
}

impl ModelConfig {
    pub fn p0_belief(&self) -> GaussianBelief {
        self.p0
            .clone()
            .unwrap_or_else(|| GaussianBelief::standard(self.d_x))
    }

    /// Emission noise is trainable unless fixed explicitly.
    pub fn r_is_trainable(&self) -> bool {
        self.learn_r && self.fixed_r.is_none()
    }
}
