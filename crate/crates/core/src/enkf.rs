//! Differentiable ensemble Kalman filter: particle propagation through a
//! per-particle Gaussian transition, moment matching, perturbed-observation
//! Kalman update, and the per-step marginal log-likelihood.
//!
//! Ensembles are `N x d_x` matrices with one particle per row. All noise
//! enters through externally supplied standard-normal draws (the
//! reparameterization trick), so a step is differentiable w.r.t. everything
//! upstream: transition parameters, process noise, and emission noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::gp::GaussianBelief;

/// Fixed linear emission `y = C x + e`, `e ~ N(0, diag(exp(log_r)))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmissionModel {
    pub c: DMatrix<f64>,     // d_y x d_x
    pub log_r: DMatrix<f64>, // d_y x 1
}

impl EmissionModel {
    pub fn new(c: DMatrix<f64>, r_diag: &DVector<f64>) -> Self {
        EmissionModel {
            log_r: DMatrix::from_fn(r_diag.len(), 1, |i, _| r_diag[i].ln()),
            c,
        }
    }

    pub fn d_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.c.ncols()
    }

    pub fn r_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.log_r.nrows(), |i, _| self.log_r[(i, 0)].exp())
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.r_diag())
    }
}

/// Which covariance the per-step observation likelihood uses: the proper
/// marginal `C P C^T + R`, or the literal `C P C^T` ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eq27Mode {
    WithR,
    Literal,
}

/// Emission nodes on a tape. `c` is always a constant; `log_r` may be a
/// trainable leaf.
#[derive(Debug, Clone, Copy)]
pub struct EmissionNodes {
    pub c: NodeId,     // d_y x d_x
    pub log_r: NodeId, // d_y x 1
}

/// Everything one filter step produces.
pub struct StepNodes {
    pub x_predicted: NodeId, // N x d_x
    pub x_filtered: NodeId,  // N x d_x
    pub pred_mean: NodeId,   // d_x x 1
    pub pred_cov: NodeId,    // d_x x d_x
    pub gain: NodeId,        // d_x x d_y
    pub loglik: NodeId,      // 1 x 1
    pub filt_mean: NodeId,   // d_x x 1 (moment-matched update)
    pub filt_cov: NodeId,    // d_x x d_x
}

/// Draw the predicted ensemble: `x_pred = mean + sqrt(var) .* eps`.
///
/// `means`/`vars` come from the transition conditional evaluated at every
/// particle; variances more negative than -1e-10 abort the step.
pub fn propagate_ensemble_t(
    tape: &mut Tape,
    means: NodeId,
    vars: NodeId,
    eps: &DMatrix<f64>,
) -> Result<NodeId> {
    let (n, d_x) = tape.shape(means);
    if eps.nrows() != n || eps.ncols() != d_x {
        return Err(Error::ShapeMismatch {
            op: "propagate_ensemble",
            detail: format!("eps {}x{}, expected {n}x{d_x}", eps.nrows(), eps.ncols()),
        });
    }
    let sd = tape.sqrt(vars).map_err(|e| match e {
        Error::InvalidArgument(msg) => {
            Error::InvalidArgument(format!("negative predictive variance: {msg}"))
        }
        other => other,
    })?;
    let eps_n = tape.constant(eps.clone());
    let noise = tape.hadamard(sd, eps_n)?;
    tape.add(means, noise)
}

/// Sample mean and regularized sample covariance of an ensemble:
/// `P = (1/(N-1)) sum (x - m)(x - m)^T + lambda I`.
pub fn ensemble_moments_t(
    tape: &mut Tape,
    ensemble: NodeId,
    lambda_ens: f64,
) -> Result<(NodeId, NodeId)> {
    let (n, d_x) = tape.shape(ensemble);
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs at least 2 particles, got {n}"
        )));
    }
    let ones_row = tape.ones(1, n);
    let sums = tape.matmul(ones_row, ensemble)?; // 1 x d_x
    let mean_row = tape.scale(sums, 1.0 / n as f64);
    let ones_col = tape.ones(n, 1);
    let mean_b = tape.matmul(ones_col, mean_row)?; // N x d_x
    let centered = tape.sub(ensemble, mean_b)?;
    let outer = tape.matmul_tn(centered, centered)?; // d_x x d_x
    let cov0 = tape.scale(outer, 1.0 / (n as f64 - 1.0));
    let eye = tape.eye(d_x);
    let reg = tape.scale(eye, lambda_ens);
    let cov = tape.add(cov0, reg)?;
    let mean = tape.transpose(mean_row); // d_x x 1
    Ok((mean, cov))
}

/// Innovation covariance `S = C P C^T + R` and the Kalman gain
/// `G = P C^T S^{-1}`, both via Cholesky solves.
pub fn kalman_gain_t(
    tape: &mut Tape,
    pred_cov: NodeId,
    em: &EmissionNodes,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (d_y, _) = tape.shape(em.c);
    let r_diag = tape.exp(em.log_r); // d_y x 1
    let ones_dy = tape.ones(1, d_y);
    let r_b = tape.matmul(r_diag, ones_dy)?; // d_y x d_y (columns repeat)
    let eye = tape.eye(d_y);
    let r_mat = tape.hadamard(r_b, eye)?; // diag(r)
    let cp = tape.matmul(em.c, pred_cov)?; // d_y x d_x
    let cpct = tape.matmul_nt(cp, em.c)?; // d_y x d_y
    let s = tape.add(cpct, r_mat)?;
    let l_s = tape.cholesky(s)?;
    let w = tape.tri_solve_lower(l_s, cp)?;
    let gt = tape.tri_solve_lower_t(l_s, w)?; // S^{-1} C P, d_y x d_x
    let gain = tape.transpose(gt); // d_x x d_y
    Ok((gain, s, l_s))
}

/// Perturbed-observation update:
/// `x^n = xbar^n + G (y + R^{1/2} eps^n - C xbar^n)`.
pub fn update_ensemble_t(
    tape: &mut Tape,
    x_pred: NodeId,
    gain: NodeId,
    em: &EmissionNodes,
    y: &DVector<f64>,
    eps: &DMatrix<f64>,
) -> Result<NodeId> {
    let (n, _) = tape.shape(x_pred);
    let d_y = tape.shape(em.c).0;
    if eps.nrows() != n || eps.ncols() != d_y {
        return Err(Error::ShapeMismatch {
            op: "update_ensemble",
            detail: format!("eps {}x{}, expected {n}x{d_y}", eps.nrows(), eps.ncols()),
        });
    }
    if y.len() != d_y {
        return Err(Error::ShapeMismatch {
            op: "update_ensemble",
            detail: format!("y has {} entries, expected {d_y}", y.len()),
        });
    }
    let half_log_r = tape.scale(em.log_r, 0.5);
    let r_sd = tape.exp(half_log_r); // d_y x 1
    let ones_col = tape.ones(n, 1);
    let r_sd_b = tape.matmul_nt(ones_col, r_sd)?; // N x d_y
    let eps_n = tape.constant(eps.clone());
    let obs_noise = tape.hadamard(eps_n, r_sd_b)?;
    let y_row = tape.constant(DMatrix::from_fn(1, d_y, |_, j| y[j]));
    let y_b = tape.matmul(ones_col, y_row)?; // N x d_y
    let perturbed = tape.add(y_b, obs_noise)?;
    let predicted_obs = tape.matmul_nt(x_pred, em.c)?; // N x d_y
    let innovation = tape.sub(perturbed, predicted_obs)?;
    let correction = tape.matmul_nt(innovation, gain)?; // N x d_x
    tape.add(x_pred, correction)
}

/// Per-step marginal log-likelihood `log N(y | C m, S_used)`.
///
/// `WithR` reuses the gain's innovation covariance factor; `Literal` builds
/// `C P C^T` without the emission noise.
pub fn step_log_likelihood_t(
    tape: &mut Tape,
    pred_mean: NodeId,
    pred_cov: NodeId,
    em: &EmissionNodes,
    y: &DVector<f64>,
    mode: Eq27Mode,
    l_s_with_r: NodeId,
) -> Result<NodeId> {
    let d_y = tape.shape(em.c).0;
    let y_col = tape.constant(DMatrix::from_fn(d_y, 1, |i, _| y[i]));
    let cm = tape.matmul(em.c, pred_mean)?;
    let v = tape.sub(y_col, cm)?;
    let l_used = match mode {
        Eq27Mode::WithR => l_s_with_r,
        Eq27Mode::Literal => {
            let cp = tape.matmul(em.c, pred_cov)?;
            let cpct = tape.matmul_nt(cp, em.c)?;
            tape.cholesky(cpct)?
        }
    };
    let w = tape.tri_solve_lower(l_used, v)?;
    let wsq = tape.hadamard(w, w)?;
    let quad = tape.sum(wsq);
    let ld = tape.logdet_from_chol(l_used)?;
    let two_pi = tape.constant(DMatrix::from_element(
        1,
        1,
        d_y as f64 * (2.0 * std::f64::consts::PI).ln(),
    ));
    let t1 = tape.add(quad, ld)?;
    let t2 = tape.add(t1, two_pi)?;
    Ok(tape.scale(t2, -0.5))
}

/// One full EnKF step given the transition conditional at every particle.
pub fn filter_step(
    tape: &mut Tape,
    means: NodeId,
    vars: NodeId,
    em: &EmissionNodes,
    y: &DVector<f64>,
    eps_prop: &DMatrix<f64>,
    eps_obs: &DMatrix<f64>,
    lambda_ens: f64,
    eq27: Eq27Mode,
) -> Result<StepNodes> {
    let x_predicted = propagate_ensemble_t(tape, means, vars, eps_prop)?;
    let (pred_mean, pred_cov) = ensemble_moments_t(tape, x_predicted, lambda_ens)?;
    let (gain, _s, l_s) = kalman_gain_t(tape, pred_cov, em)?;
    let x_filtered = update_ensemble_t(tape, x_predicted, gain, em, y, eps_obs)?;
    let loglik = step_log_likelihood_t(tape, pred_mean, pred_cov, em, y, eq27, l_s)?;
    // Moment-matched filtered belief (conditional Gaussian identity).
    let d_y = tape.shape(em.c).0;
    let y_col = tape.constant(DMatrix::from_fn(d_y, 1, |i, _| y[i]));
    let cm = tape.matmul(em.c, pred_mean)?;
    let v = tape.sub(y_col, cm)?;
    let gv = tape.matmul(gain, v)?;
    let filt_mean = tape.add(pred_mean, gv)?;
    let pct = tape.matmul_nt(pred_cov, em.c)?; // d_x x d_y
    let pg = tape.matmul_nt(pct, gain)?; // d_x x d_x
    let filt_cov = tape.sub(pred_cov, pg)?;
    Ok(StepNodes {
        x_predicted,
        x_filtered,
        pred_mean,
        pred_cov,
        gain,
        loglik,
        filt_mean,
        filt_cov,
    })
}

/// Register emission nodes with `log_r` as a constant.
pub fn emission_constants(tape: &mut Tape, em: &EmissionModel) -> EmissionNodes {
    EmissionNodes {
        c: tape.constant(em.c.clone()),
        log_r: tape.constant(em.log_r.clone()),
    }
}

// ---- plain wrappers -------------------------------------------------------

/// Sample moments of a concrete ensemble.
pub fn ensemble_moments(ensemble: &DMatrix<f64>, lambda_ens: f64) -> Result<GaussianBelief> {
    let mut tape = Tape::new();
    let e = tape.constant(ensemble.clone());
    let (mean, cov) = ensemble_moments_t(&mut tape, e, lambda_ens)?;
    Ok(GaussianBelief::new(
        DVector::from_column_slice(tape.value(mean).as_slice()),
        tape.value(cov).clone(),
    ))
}

/// Kalman gain for a concrete predicted belief.
pub fn kalman_gain(pred: &GaussianBelief, em: &EmissionModel) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new();
    let cov = tape.constant(pred.cov.clone());
    let nodes = emission_constants(&mut tape, em);
    let (gain, _, _) = kalman_gain_t(&mut tape, cov, &nodes)?;
    Ok(tape.value(gain).clone())
}

/// Per-step observation log-likelihood for a concrete predicted belief.
pub fn step_log_likelihood(
    pred: &GaussianBelief,
    em: &EmissionModel,
    y: &DVector<f64>,
    mode: Eq27Mode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let cov = tape.constant(pred.cov.clone());
    let mean = tape.constant(DMatrix::from_fn(pred.mean.len(), 1, |i, _| pred.mean[i]));
    let nodes = emission_constants(&mut tape, em);
    let (_, _, l_s) = kalman_gain_t(&mut tape, cov, &nodes)?;
    let ll = step_log_likelihood_t(&mut tape, mean, cov, &nodes, y, mode, l_s)?;
    tape.scalar(ll)
}

/// Propagate a concrete ensemble through concrete conditional moments.
pub fn propagate_ensemble(
    means: &DMatrix<f64>,
    vars: &DMatrix<f64>,
    eps: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new();
    let m = tape.constant(means.clone());
    let v = tape.constant(vars.clone());
    let out = propagate_ensemble_t(&mut tape, m, v, eps)?;
    Ok(tape.value(out).clone())
}

/// Perturbed-observation update of a concrete ensemble.
pub fn update_ensemble(
    x_pred: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    em: &EmissionModel,
    y: &DVector<f64>,
    eps: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(x_pred.clone());
    let g = tape.constant(gain.clone());
    let nodes = emission_constants(&mut tape, em);
    let out = update_ensemble_t(&mut tape, x, g, &nodes, y, eps)?;
    Ok(tape.value(out).clone())
}
