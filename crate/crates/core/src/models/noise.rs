//! Counter-based noise plan. All standard-normal draws used by a rollout are
//! keyed by (seed, round, stream), so a fixed seed reproduces a run
//! bit-for-bit regardless of evaluation order or parallelism.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Reserved rounds for non-training draws.
pub const ROUND_EVAL: u64 = u64::MAX - 1;
pub const ROUND_PREDICT: u64 = u64::MAX - 2;
pub const ROUND_INIT: u64 = u64::MAX - 3;

const KIND_U: u64 = 0;
const KIND_X0: u64 = 1;
const KIND_PROP: u64 = 2;
const KIND_OBS: u64 = 3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One (seed, round) slice of the noise space.
#[derive(Debug, Clone, Copy)]
pub struct NoisePlan {
    key: [u8; 32],
}

impl NoisePlan {
    pub fn new(seed: u64, round: u64) -> Self {
        Self::with_sample(seed, round, 0)
    }

    /// Separate noise slice per Monte Carlo sample index.
    pub fn with_sample(seed: u64, round: u64, sample: u64) -> Self {
        let a = splitmix64(seed ^ 0xD1B5_4A32_D192_ED03);
        let b = splitmix64(a ^ round);
        let c = splitmix64(b ^ sample.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(c.wrapping_add(i as u64)).to_le_bytes());
        }
        NoisePlan { key }
    }

    fn rng(&self, stream: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::from_seed(self.key);
        rng.set_stream(stream);
        rng
    }

    fn draw(&self, stream: u64, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = self.rng(stream);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Draws for the inducing-output sample, `M x d_x`.
    pub fn eps_u(&self, m: usize, d_x: usize) -> DMatrix<f64> {
        self.draw(KIND_U, m, d_x)
    }

    /// Draws for the initial ensemble, `N x d_x`.
    pub fn eps_x0(&self, n: usize, d_x: usize) -> DMatrix<f64> {
        self.draw(KIND_X0, n, d_x)
    }

    /// Process-noise draws for step `t` (1-based), `N x d_x`.
    pub fn eps_prop(&self, t: usize, n: usize, d_x: usize) -> DMatrix<f64> {
        self.draw(((t as u64) << 2) | KIND_PROP, n, d_x)
    }

    /// Perturbed-observation draws for step `t`, `N x d_y`.
    pub fn eps_obs(&self, t: usize, n: usize, d_y: usize) -> DMatrix<f64> {
        self.draw(((t as u64) << 2) | KIND_OBS, n, d_y)
    }

    /// Uniform draws in `[0, 1)`, used for inducing-input initialization.
    pub fn uniform(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = self.rng(u64::MAX);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }
}
