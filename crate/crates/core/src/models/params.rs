//! Parameter containers, initialization, and tape registration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::noise::{NoisePlan, ROUND_INIT};
use super::train::Adam;
use crate::diffgraph::{NodeId, Tape};
use crate::enkf::{EmissionModel, EmissionNodes};
use crate::error::Result;
use crate::gp::{GpModelNodes, InducingSet, InitialStateDist, KernelParams};
use crate::linalg;

/// Model parameters: GP hyperparameters, process noise, and the emission
/// model (fixed C, diagonal R on log scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpssmParams {
    pub kernel: KernelParams,
    pub log_q: DMatrix<f64>, // d_x x 1
    pub emission: EmissionModel,
}

impl GpssmParams {
    pub fn q_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.log_q.nrows(), |i, _| self.log_q[(i, 0)].exp())
    }
}

/// Variational parameters: inducing set and initial-state distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalParams {
    pub inducing: InducingSet,
    pub init_state: InitialStateDist,
}

/// Mutable training state: parameters, optimizer moments, and the iteration
/// counter that (with the seed) determines every noise draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub params: GpssmParams,
    pub varparams: VariationalParams,
    pub optimizer: Adam,
    pub iteration: usize,
    pub seed: u64,
}

/// Node handles of all registered parameters on one tape.
pub struct ModelNodes {
    pub gp: GpModelNodes,
    pub em: EmissionNodes,
    pub m: NodeId,
    pub l_raw: Vec<NodeId>,
    pub m0: NodeId,
    pub l0_raw: NodeId,
}

/// Initialize a trainer from the observations: inducing inputs cover the
/// bounding box of the pseudo-states `C^+ y`, the initial-state mean anchors
/// at the first pseudo-state, and noise variances start deliberately large.
pub fn init_trainer(cfg: &ModelConfig, c: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<TrainerState> {
    let d_x = cfg.d_x;
    let d_y = cfg.d_y;
    let m_ind = cfg.num_inducing;
    let c_pinv = linalg::pseudo_inverse(c)?; // d_x x d_y
    let pseudo = y * c_pinv.transpose(); // T x d_x

    let mut lo = vec![f64::INFINITY; d_x];
    let mut hi = vec![f64::NEG_INFINITY; d_x];
    for i in 0..pseudo.nrows() {
        for d in 0..d_x {
            lo[d] = lo[d].min(pseudo[(i, d)]);
            hi[d] = hi[d].max(pseudo[(i, d)]);
        }
    }
    for d in 0..d_x {
        if !(hi[d] - lo[d]).is_finite() || hi[d] - lo[d] < 1e-9 {
            let center = if lo[d].is_finite() { lo[d] } else { 0.0 };
            lo[d] = center - 1.0;
            hi[d] = center + 1.0;
        }
    }
    // Stratified uniform draws: one point per cell and coordinate, so the
    // inducing inputs cover the box without accidental clusters (clustered
    // inputs make the Gram matrix numerically singular).
    let uniforms = NoisePlan::new(cfg.seed, ROUND_INIT).uniform(m_ind, d_x);
    let z = DMatrix::from_fn(m_ind, d_x, |i, d| {
        let cell = (hi[d] - lo[d]) / m_ind as f64;
        lo[d] + cell * (i as f64 + uniforms[(i, d)])
    });

    let small = 0.1f64.ln();
    let diag_raw = |n: usize| DMatrix::from_fn(n, n, |i, j| if i == j { small } else { 0.0 });
    let m0 = DMatrix::from_fn(d_x, 1, |d, _| pseudo[(0, d)]);

    let log_r = match &cfg.fixed_r {
        Some(r) => DMatrix::from_fn(d_y, 1, |i, _| r[i].ln()),
        None => DMatrix::from_element(d_y, 1, cfg.init_noise_variance.ln()),
    };

    let kernel = KernelParams::isotropic(d_x, cfg.init_signal_variance, cfg.init_lengthscale);

    // Start q(u) at the prior: S_d = K_zz, m = 0. The inducing KL then
    // vanishes at initialization, so early gradients come from the data
    // instead of from repairing an arbitrary variational covariance.
    let mut l_raw = Vec::with_capacity(d_x);
    for d in 0..d_x {
        let kzz = crate::gp::kernel_matrix(&z, &z, &kernel, d)?;
        let factor = linalg::cholesky_jittered(&kzz, cfg.jitter)?.factor;
        let mut w = DMatrix::zeros(m_ind, m_ind);
        for i in 0..m_ind {
            for j in 0..i {
                w[(i, j)] = factor[(i, j)];
            }
            w[(i, i)] = factor[(i, i)].ln();
        }
        l_raw.push(w);
    }

    Ok(TrainerState {
        params: GpssmParams {
            kernel,
            log_q: DMatrix::from_element(d_x, 1, cfg.init_noise_variance.ln()),
            emission: EmissionModel {
                c: c.clone(),
                log_r,
            },
        },
        varparams: VariationalParams {
            inducing: InducingSet {
                z,
                m: DMatrix::zeros(m_ind, d_x),
                l_raw,
            },
            init_state: InitialStateDist {
                m0,
                l0_raw: diag_raw(d_x),
            },
        },
        optimizer: Adam::new(cfg.learning_rate),
        iteration: 0,
        seed: cfg.seed,
    })
}

/// Register the full parameter set on a tape. With `trainable` set, every
/// learnable array becomes a named leaf (subject to the learn flags);
/// otherwise everything enters as constants, which is what detached
/// (gradient-free) evaluation uses.
pub fn register_model(
    tape: &mut Tape,
    params: &GpssmParams,
    varparams: &VariationalParams,
    cfg: &ModelConfig,
    trainable: bool,
) -> Result<ModelNodes> {
    let put = |tape: &mut Tape, name: &str, value: &DMatrix<f64>, learn: bool| {
        if trainable && learn {
            tape.leaf(name, value.clone())
        } else {
            Ok(tape.constant(value.clone()))
        }
    };
    let log_sf2 = put(tape, "gp.log_sf2", &params.kernel.log_sf2, true)?;
    let log_ls = put(tape, "gp.log_ls", &params.kernel.log_ls, true)?;
    let log_q = put(tape, "noise.log_q", &params.log_q, cfg.learn_q)?;
    let log_r = put(tape, "noise.log_r", &params.emission.log_r, cfg.r_is_trainable())?;
    let z = put(tape, "var.z", &varparams.inducing.z, true)?;
    let m = put(tape, "var.m", &varparams.inducing.m, true)?;
    let mut l_raw = Vec::with_capacity(varparams.inducing.l_raw.len());
    for (d, w) in varparams.inducing.l_raw.iter().enumerate() {
        l_raw.push(put(tape, &format!("var.l_raw.{d}"), w, true)?);
    }
    let m0 = put(tape, "var.m0", &varparams.init_state.m0, cfg.learn_x0)?;
    let l0_raw = put(tape, "var.l0_raw", &varparams.init_state.l0_raw, cfg.learn_x0)?;
    let c = tape.constant(params.emission.c.clone());
    Ok(ModelNodes {
        gp: GpModelNodes {
            z,
            log_sf2,
            log_ls,
            log_q,
        },
        em: EmissionNodes { c, log_r },
        m,
        l_raw,
        m0,
        l0_raw,
    })
}

/// Assemble node handles from leaves registered by someone else (gradient
/// checks own their tape). Requires every parameter name to be present.
pub fn model_nodes_from_leaves(
    tape: &mut Tape,
    ids: &crate::diffgraph::LeafIds,
    c: &DMatrix<f64>,
    d_x: usize,
) -> Result<ModelNodes> {
    let get = |name: &str| -> Result<NodeId> {
        ids.get(name)
            .copied()
            .ok_or_else(|| crate::error::Error::InvalidArgument(format!("missing leaf `{name}`")))
    };
    let mut l_raw = Vec::with_capacity(d_x);
    for d in 0..d_x {
        l_raw.push(get(&format!("var.l_raw.{d}"))?);
    }
    let c_node = tape.constant(c.clone());
    Ok(ModelNodes {
        gp: GpModelNodes {
            z: get("var.z")?,
            log_sf2: get("gp.log_sf2")?,
            log_ls: get("gp.log_ls")?,
            log_q: get("noise.log_q")?,
        },
        em: EmissionNodes {
            c: c_node,
            log_r: get("noise.log_r")?,
        },
        m: get("var.m")?,
        l_raw,
        m0: get("var.m0")?,
        l0_raw: get("var.l0_raw")?,
    })
}

/// Snapshot every trainable array into a name-keyed map.
pub fn to_param_map(
    params: &GpssmParams,
    varparams: &VariationalParams,
    cfg: &ModelConfig,
) -> crate::diffgraph::ParamMap {
    let mut map = crate::diffgraph::ParamMap::new();
    let mut p = params.clone();
    let mut v = varparams.clone();
    for_each_trainable(&mut p, &mut v, cfg, |name, value| {
        map.insert(name.to_string(), value.clone());
    });
    map
}

/// Visit every trainable parameter array in a fixed order.
pub fn for_each_trainable(
    params: &mut GpssmParams,
    varparams: &mut VariationalParams,
    cfg: &ModelConfig,
    mut f: impl FnMut(&str, &mut DMatrix<f64>),
) {
    f("gp.log_sf2", &mut params.kernel.log_sf2);
    f("gp.log_ls", &mut params.kernel.log_ls);
    if cfg.learn_q {
        f("noise.log_q", &mut params.log_q);
    }
    if cfg.r_is_trainable() {
        f("noise.log_r", &mut params.emission.log_r);
    }
    f("var.z", &mut varparams.inducing.z);
    f("var.m", &mut varparams.inducing.m);
    for (d, w) in varparams.inducing.l_raw.iter_mut().enumerate() {
        f(&format!("var.l_raw.{d}"), w);
    }
    if cfg.learn_x0 {
        f("var.m0", &mut varparams.init_state.m0);
        f("var.l0_raw", &mut varparams.init_state.l0_raw);
    }
}

impl TrainerState {
    /// One Adam ascent step on the trainable parameters given loss gradients.
    pub fn adam_update(&mut self, cfg: &ModelConfig, grads: &crate::diffgraph::Gradients) {
        let TrainerState {
            params,
            varparams,
            optimizer,
            ..
        } = self;
        optimizer.begin_step();
        for_each_trainable(params, varparams, cfg, |name, value| {
            if let Some(g) = grads.get(name) {
                optimizer.apply(name, value, g);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_covers_pseudo_state_box() {
        let cfg = ModelConfig {
            d_x: 1,
            d_y: 1,
            num_inducing: 20,
            ..Default::default()
        };
        let y = DMatrix::from_fn(50, 1, |i, _| (i as f64) / 10.0 - 2.0);
        let c = DMatrix::identity(1, 1);
        let state = init_trainer(&cfg, &c, &y).unwrap();
        for i in 0..20 {
            let z = state.varparams.inducing.z[(i, 0)];
            assert!((-2.0..=2.9).contains(&z), "z = {z}");
        }
        assert_eq!(state.varparams.init_state.m0[(0, 0)], -2.0);
        // q(u) starts at the prior: S = K_zz up to jitter.
        let l = state.varparams.inducing.factor(0);
        let s = &l * l.transpose();
        let kzz = crate::gp::kernel_matrix(
            &state.varparams.inducing.z,
            &state.varparams.inducing.z,
            &state.params.kernel,
            0,
        )
        .unwrap();
        let rel = (&s - &kzz).norm() / kzz.norm();
        assert!(rel < 1e-4, "S deviates from prior Gram by {rel}");
        // The initial-state factor stays at 0.1 I.
        let l0 = state.varparams.init_state.factor();
        assert!((l0[(0, 0)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fixed_r_is_not_trainable() {
        let cfg = ModelConfig {
            fixed_r: Some(vec![0.008]),
            ..Default::default()
        };
        let y = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let mut state = init_trainer(&cfg, &DMatrix::identity(1, 1), &y).unwrap();
        assert!((state.params.emission.r_diag()[0] - 0.008).abs() < 1e-12);
        let mut names = Vec::new();
        for_each_trainable(&mut state.params, &mut state.varparams, &cfg, |n, _| {
            names.push(n.to_string())
        });
        assert!(!names.iter().any(|n| n == "noise.log_r"));
        assert!(names.iter().any(|n| n == "var.m"));
    }
}
