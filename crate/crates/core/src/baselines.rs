//! Exact Kalman filter and linear-Gaussian simulator. These are the oracles
//! against which the ensemble filter's statistics and the learned models'
//! filtering accuracy are judged.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::GaussianBelief;
use crate::linalg;

/// Time-invariant linear Gaussian model
/// `x_t = H x_{t-1} + v_t`, `y_t = C x_t + e_t`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub h: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub prior: GaussianBelief,
}

impl LinearModel {
    pub fn d_x(&self) -> usize {
        self.h.nrows()
    }

    pub fn d_y(&self) -> usize {
        self.c.nrows()
    }
}

/// Car-tracking constant-velocity model: state (p1, p2, v1, v2), identity
/// emission on all four components, discretized with step `dt` and
/// continuous-time accelerations (q1, q2). Prior is N(0, I).
pub fn car_track_model(dt: f64, q1: f64, q2: f64, sigma_r: f64) -> LinearModel {
    let h = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let dt3 = dt * dt * dt / 3.0;
    let dt2 = dt * dt / 2.0;
    let q = DMatrix::from_row_slice(
        4,
        4,
        &[
            q1 * dt3,
            0.0,
            q1 * dt2,
            0.0,
            0.0,
            q2 * dt3,
            0.0,
            q2 * dt2,
            q1 * dt2,
            0.0,
            q1 * dt,
            0.0,
            0.0,
            q2 * dt2,
            0.0,
            q2 * dt,
        ],
    );
    LinearModel {
        h,
        c: DMatrix::identity(4, 4),
        q,
        r: DMatrix::identity(4, 4) * (sigma_r * sigma_r),
        prior: GaussianBelief::standard(4),
    }
}

/// Result of a Kalman-filter pass: per-step predicted and filtered beliefs
/// plus the total log-evidence `sum_t log N(y_t | C mbar_t, C Pbar_t C^T + R)`.
#[derive(Debug, Clone)]
pub struct KalmanRun {
    pub predicted: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
    pub log_evidence: f64,
}

impl KalmanRun {
    /// Filtered means stacked as a `T x d_x` matrix.
    pub fn filtered_means(&self) -> DMatrix<f64> {
        let t_len = self.filtered.len();
        let d_x = self.filtered.first().map_or(0, |b| b.mean.len());
        DMatrix::from_fn(t_len, d_x, |t, d| self.filtered[t].mean[d])
    }
}

/// Standard predict/update recursion with a Joseph-form covariance update.
pub fn kalman_filter(model: &LinearModel, y: &DMatrix<f64>) -> Result<KalmanRun> {
    let d_x = model.d_x();
    let d_y = model.d_y();
    if y.ncols() != d_y {
        return Err(Error::ShapeMismatch {
            op: "kalman_filter",
            detail: format!("observations have {} columns, expected {d_y}", y.ncols()),
        });
    }
    let t_len = y.nrows();
    let mut mean = model.prior.mean.clone();
    let mut cov = model.prior.cov.clone();
    let mut predicted = Vec::with_capacity(t_len);
    let mut filtered = Vec::with_capacity(t_len);
    let mut log_evidence = 0.0;
    let eye = DMatrix::<f64>::identity(d_x, d_x);

    for t in 0..t_len {
        // Predict.
        let m_pred = &model.h * &mean;
        let p_pred = linalg::symmetrize(&(&model.h * &cov * model.h.transpose() + &model.q));
        predicted.push(GaussianBelief::new(m_pred.clone(), p_pred.clone()));

        // Update.
        let y_t = DVector::from_fn(d_y, |i, _| y[(t, i)]);
        let innovation = &y_t - &model.c * &m_pred;
        let s = linalg::symmetrize(&(&model.c * &p_pred * model.c.transpose() + &model.r));
        let chol = linalg::cholesky_jittered(&s, 0.0).map_err(|e| e.at_step(t))?;
        let pct = &p_pred * model.c.transpose();
        let gain = linalg::chol_solve(&chol.factor, &pct.transpose()).transpose();
        mean = &m_pred + &gain * &innovation;
        let a = &eye - &gain * &model.c;
        cov = linalg::symmetrize(
            &(&a * &p_pred * a.transpose() + &gain * &model.r * gain.transpose()),
        );
        filtered.push(GaussianBelief::new(mean.clone(), cov.clone()));

        log_evidence += linalg::gaussian_logpdf(&y_t, &(&model.c * &m_pred), &s)?;
    }
    Ok(KalmanRun {
        predicted,
        filtered,
        log_evidence,
    })
}

/// Ancestral sampling from the generative model. Returns the latent states
/// including `x_0` (shape `(T+1) x d_x`) and the observations (`T x d_y`).
pub fn simulate_lgssm(
    model: &LinearModel,
    t_len: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if t_len < 1 {
        return Err(Error::InvalidArgument("simulate_lgssm needs T >= 1".into()));
    }
    let d_x = model.d_x();
    let d_y = model.d_y();
    let l_prior = chol_or_zero(&model.prior.cov)?;
    let l_q = chol_or_zero(&model.q)?;
    let l_r = chol_or_zero(&model.r)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let draw = |n: usize, rng: &mut ChaCha12Rng| {
        DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    let mut states = DMatrix::zeros(t_len + 1, d_x);
    let mut obs = DMatrix::zeros(t_len, d_y);
    let x0 = &model.prior.mean + &l_prior * draw(d_x, &mut rng);
    for d in 0..d_x {
        states[(0, d)] = x0[d];
    }
    let mut x = x0;
    for t in 1..=t_len {
        x = &model.h * &x + &l_q * draw(d_x, &mut rng);
        let y = &model.c * &x + &l_r * draw(d_y, &mut rng);
        for d in 0..d_x {
            states[(t, d)] = x[d];
        }
        for d in 0..d_y {
            obs[(t - 1, d)] = y[d];
        }
    }
    Ok((states, obs))
}

/// Factor a PSD covariance, tolerating exact zero matrices (no noise).
fn chol_or_zero(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    Ok(linalg::cholesky_jittered(m, 1e-12)?.factor)
}
