//! Dataset generation and evaluation plumbing: the synthetic kink benchmark,
//! CSV ingestion for system-identification series, train-split
//! standardization, and the evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation sequence with optional latent ground truth and the
/// standardization statistics of its training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub y: DMatrix<f64>,                  // T x d_y
    pub x_true: Option<DMatrix<f64>>,     // (T+1) x d_x
    pub stats: Option<Standardization>,
    pub seed: u64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
}

impl Dataset {
    pub fn t_len(&self) -> usize {
        self.y.nrows()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }
}

/// Per-column mean and standard deviation computed on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub split_fraction: f64,
}

/// The kink transition function
/// `f(x) = 0.8 + (x + 0.2) (1 - 5 / (1 + exp(-2x)))`.
pub fn kink_true(x: f64) -> f64 {
    0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + (-2.0 * x).exp()))
}

/// Simulate the kink system: `x_{t+1} = f(x_t) + v_t`, `y_t = x_t + e_t`,
/// starting from `x_0 = 0.5`.
pub fn simulate_kink(t_len: usize, sigma_q2: f64, sigma_r2: f64, seed: u64) -> Result<Dataset> {
    if sigma_q2 < 0.0 || sigma_r2 < 0.0 {
        return Err(Error::InvalidArgument("noise variances must be >= 0".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sq = sigma_q2.sqrt();
    let sr = sigma_r2.sqrt();
    let mut states = DMatrix::zeros(t_len + 1, 1);
    let mut obs = DMatrix::zeros(t_len, 1);
    let mut x = 0.5;
    states[(0, 0)] = x;
    for t in 1..=t_len {
        x = kink_true(x) + sq * rng.sample::<f64, _>(StandardNormal);
        states[(t, 0)] = x;
        obs[(t - 1, 0)] = x + sr * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(Dataset {
        name: "kink".into(),
        y: obs,
        x_true: Some(states),
        stats: None,
        seed,
        sigma_q2,
        sigma_r2,
    })
}

/// Serialize a dataset using the CSV schema `t, y1..y_dy[, x1..x_dx]`.
/// Latent-truth columns hold the state at the observation time (`x_{t+1}`
/// of the simulator indexing).
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let d_y = ds.d_y();
    let d_x = ds.x_true.as_ref().map_or(0, |x| x.ncols());
    let mut out = String::new();
    out.push('t');
    for j in 1..=d_y {
        let _ = write!(out, ",y{j}");
    }
    for j in 1..=d_x {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for t in 0..ds.t_len() {
        let _ = write!(out, "{}", t + 1);
        for j in 0..d_y {
            let _ = write!(out, ",{}", fmt_f64(ds.y[(t, j)]));
        }
        if let Some(x) = &ds.x_true {
            for j in 0..d_x {
                let _ = write!(out, ",{}", fmt_f64(x[(t + 1, j)]));
            }
        }
        out.push('\n');
    }
    out
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_csv(ds))?;
    Ok(())
}

/// Parse the schema above. Header is required; `x*` columns are optional.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv"))
}

pub fn parse_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header starting with `t`, got `{header}`"),
        });
    }
    let d_y = cols.iter().filter(|c| c.starts_with('y')).count();
    let d_x = cols.iter().filter(|c| c.starts_with('x')).count();
    if d_y == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no y columns in header".into(),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != cols.len() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {} fields, got {}", cols.len(), parts.len()),
            });
        }
        let mut row = Vec::with_capacity(parts.len() - 1);
        for p in &parts[1..] {
            let v: f64 = p.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("non-numeric cell `{p}`"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    let t_len = rows.len();
    if t_len == 0 {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let y = DMatrix::from_fn(t_len, d_y, |i, j| rows[i][j]);
    let x_true = if d_x > 0 {
        // Reconstruct (T+1) x d_x with row 0 duplicated from the first state;
        // the pre-observation initial state is not part of the file schema.
        let mut x = DMatrix::zeros(t_len + 1, d_x);
        for i in 0..t_len {
            for j in 0..d_x {
                x[(i + 1, j)] = rows[i][d_y + j];
            }
        }
        for j in 0..d_x {
            x[(0, j)] = x[(1, j)];
        }
        Some(x)
    } else {
        None
    };
    Ok(Dataset {
        name: name.to_string(),
        y,
        x_true,
        stats: None,
        seed: 0,
        sigma_q2: 0.0,
        sigma_r2: 0.0,
    })
}

/// Standardize all observation columns with statistics computed on the first
/// `split_fraction` of the sequence only. Constant columns are rejected.
pub fn standardize(ds: &Dataset, split_fraction: f64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&split_fraction) || split_fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split fraction {split_fraction} not in (0, 1]"
        )));
    }
    let t_len = ds.t_len();
    let n_train = ((t_len as f64) * split_fraction).round().max(1.0) as usize;
    let d_y = ds.d_y();
    let mut mean = vec![0.0; d_y];
    let mut std = vec![0.0; d_y];
    for j in 0..d_y {
        let mut mu = 0.0;
        for i in 0..n_train {
            mu += ds.y[(i, j)];
        }
        mu /= n_train as f64;
        let mut var = 0.0;
        for i in 0..n_train {
            let dv = ds.y[(i, j)] - mu;
            var += dv * dv;
        }
        var /= n_train as f64;
        if var < 1e-24 {
            return Err(Error::InvalidArgument(format!(
                "zero variance column y{} in training split",
                j + 1
            )));
        }
        mean[j] = mu;
        std[j] = var.sqrt();
    }
    let y = DMatrix::from_fn(t_len, d_y, |i, j| (ds.y[(i, j)] - mean[j]) / std[j]);
    Ok(Dataset {
        name: ds.name.clone(),
        y,
        x_true: ds.x_true.clone(),
        stats: Some(Standardization {
            mean,
            std,
            split_fraction,
        }),
        seed: ds.seed,
        sigma_q2: ds.sigma_q2,
        sigma_r2: ds.sigma_r2,
    })
}

/// Invert [`standardize`] on the observation matrix.
pub fn unstandardize(y: &DMatrix<f64>, stats: &Standardization) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
        y[(i, j)] * stats.std[j] + stats.mean[j]
    })
}

/// `sqrt((1/T) sum_t sum_d (est - truth)^2)`: the state-error metric with
/// the per-step sum taken over dimensions.
pub fn state_rmse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.nrows() == 0 || estimate.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "state_rmse",
            detail: format!("{:?} vs {:?}", estimate.shape(), truth.shape()),
        });
    }
    let t_len = estimate.nrows() as f64;
    let mut acc = 0.0;
    for (e, t) in estimate.iter().zip(truth.iter()) {
        let d = e - t;
        acc += d * d;
    }
    Ok((acc / t_len).sqrt())
}

/// Mean squared error with the same sum-over-dims convention.
pub fn transition_mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    let rmse = state_rmse(estimate, truth)?;
    Ok(rmse * rmse)
}

/// `(1/T) sum_t log N(truth_t | mean_t, diag(var_t))`.
pub fn transition_log_density(
    means: &DMatrix<f64>,
    vars: &DMatrix<f64>,
    truth: &DMatrix<f64>,
) -> Result<f64> {
    if means.nrows() == 0 || means.shape() != truth.shape() || vars.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "transition_log_density",
            detail: format!(
                "means {:?}, vars {:?}, truth {:?}",
                means.shape(),
                vars.shape(),
                truth.shape()
            ),
        });
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for i in 0..means.nrows() {
        for j in 0..means.ncols() {
            let v = vars[(i, j)];
            if v <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "non-positive variance at ({i},{j})"
                )));
            }
            let d = truth[(i, j)] - means[(i, j)];
            acc += -0.5 * (ln_2pi + v.ln() + d * d / v);
        }
    }
    Ok(acc / means.nrows() as f64)
}

/// Evaluation points for trajectory-based transition metrics: the visited
/// states `x_0 .. x_{T-1}` (the inputs of every transition along the series).
pub fn trajectory_points(x_true: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t_total = x_true.nrows();
    if t_total < 2 {
        return Err(Error::InvalidArgument(
            "trajectory needs at least two states".into(),
        ));
    }
    Ok(x_true.view((0, 0), (t_total - 1, x_true.ncols())).into_owned())
}

/// Uniform evaluation grid over `[lo, hi]` as an `n x 1` matrix.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |i, _| {
        if n == 1 {
            lo
        } else {
            lo + (hi - lo) * (i as f64) / ((n - 1) as f64)
        }
    })
}

/// Forecast RMSE over the first `horizon` steps of a rollout.
pub fn forecast_rmse(
    predicted: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    horizon: usize,
) -> Result<f64> {
    let h = horizon.min(predicted.nrows()).min(truth.nrows());
    if h == 0 {
        return Err(Error::InvalidArgument("empty forecast horizon".into()));
    }
    let pred = predicted.view((0, 0), (h, predicted.ncols())).into_owned();
    let tr = truth.view((0, 0), (h, truth.ncols())).into_owned();
    state_rmse(&pred, &tr)
}

/// Evaluate a vector of per-seed values to its median.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
