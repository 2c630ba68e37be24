//! Forward forecasting: roll the ensemble through the learned transition
//! without observation updates, reporting predicted observation moments.

use nalgebra::{DMatrix, DVector};

use super::config::ModelConfig;
use super::noise::{NoisePlan, ROUND_PREDICT};
use super::params::{register_model, GpssmParams, VariationalParams};
use crate::diffgraph::Tape;
use crate::enkf;
use crate::error::Result;
use crate::gp;

/// Per-horizon predicted observation mean and variance (`H x d_y` each).
/// Variance is the ensemble spread mapped through the emission plus R.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub obs_mean: DMatrix<f64>,
    pub obs_var: DMatrix<f64>,
    /// Ensemble after the last step.
    pub final_ensemble: DMatrix<f64>,
}

/// Roll `init_ensemble` forward `horizon` steps with `u = m`.
pub fn predict_forward(
    params: &GpssmParams,
    varparams: &VariationalParams,
    cfg: &ModelConfig,
    init_ensemble: &DMatrix<f64>,
    horizon: usize,
) -> Result<Forecast> {
    let d_y = params.emission.d_y();
    let n = init_ensemble.nrows();
    let mut obs_mean = DMatrix::zeros(horizon, d_y);
    let mut obs_var = DMatrix::zeros(horizon, d_y);
    let mut ensemble = init_ensemble.clone();
    let r_diag = params.emission.r_diag();
    let plan = NoisePlan::new(cfg.seed, ROUND_PREDICT);

    for h in 1..=horizon {
        let mut tape = Tape::with_jitter(cfg.jitter);
        let nodes = register_model(&mut tape, params, varparams, cfg, false)?;
        let u = (0..cfg.d_x)
            .map(|d| tape.slice(nodes.m, 0, cfg.num_inducing, d, 1))
            .collect::<Result<Vec<_>>>()?;
        let prep = gp::prepare_gp_transition(&mut tape, &nodes.gp, &u, cfg.inducing_noise)?;
        let x_prev = tape.constant(ensemble.clone());
        let (means, vars) = gp::gp_conditional_t(&mut tape, &prep, x_prev)?;
        let eps = plan.eps_prop(h, n, cfg.d_x);
        let x_next = enkf::propagate_ensemble_t(&mut tape, means, vars, &eps)?;
        ensemble = tape.value(x_next).clone();

        let mean = column_means(&ensemble);
        let proj = &params.emission.c * &mean;
        for j in 0..d_y {
            obs_mean[(h - 1, j)] = proj[j];
        }
        let spread = if n >= 2 {
            let b = enkf::ensemble_moments(&ensemble, 0.0)?;
            &params.emission.c * &b.cov * params.emission.c.transpose()
        } else {
            DMatrix::zeros(d_y, d_y)
        };
        for j in 0..d_y {
            obs_var[(h - 1, j)] = spread[(j, j)] + r_diag[j];
        }
    }
    Ok(Forecast {
        obs_mean,
        obs_var,
        final_ensemble: ensemble,
    })
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}
