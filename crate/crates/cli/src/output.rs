//! Machine-readable outputs: training history, filtered-state bands, and
//! final metrics. metrics.json is byte-deterministic for a fixed seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use envi_core::gp::GaussianBelief;
use envi_core::models::HistoryRow;
use envi_core::Result;
use nalgebra::DMatrix;

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut s = String::from("iteration,elbo,loglik,kl_x0,kl_u,grad_norm,seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration, r.elbo, r.loglik, r.kl_x0, r.kl_u, r.grad_norm, r.seconds
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Filtered means with +/- 2 sigma bands, plus the latent truth when known.
pub fn write_states(
    path: &Path,
    beliefs: &[GaussianBelief],
    truth: Option<&DMatrix<f64>>,
) -> Result<()> {
    let d_x = beliefs.first().map_or(0, |b| b.mean.len());
    let mut s = String::from("t");
    for d in 1..=d_x {
        let _ = write!(s, ",x{d}_mean,x{d}_lo,x{d}_hi");
    }
    if truth.is_some() {
        for d in 1..=d_x {
            let _ = write!(s, ",x{d}_true");
        }
    }
    s.push('\n');
    for (t, b) in beliefs.iter().enumerate() {
        let _ = write!(s, "{}", t + 1);
        for d in 0..d_x {
            let sd = b.cov[(d, d)].max(0.0).sqrt();
            let _ = write!(
                s,
                ",{},{},{}",
                b.mean[d],
                b.mean[d] - 2.0 * sd,
                b.mean[d] + 2.0 * sd
            );
        }
        if let Some(x) = truth {
            for d in 0..d_x {
                let _ = write!(s, ",{}", x[(t + 1, d)]);
            }
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Per-horizon predicted observation mean and variance.
pub fn write_predictions(path: &Path, mean: &DMatrix<f64>, var: &DMatrix<f64>) -> Result<()> {
    let d_y = mean.ncols();
    let mut s = String::from("h");
    for d in 1..=d_y {
        let _ = write!(s, ",y{d}_mean,y{d}_var");
    }
    s.push('\n');
    for h in 0..mean.nrows() {
        let _ = write!(s, "{}", h + 1);
        for d in 0..d_y {
            let _ = write!(s, ",{},{}", mean[(h, d)], var[(h, d)]);
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_metrics(path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
    let json = serde_json::to_string_pretty(metrics)?;
    std::fs::write(path, json)?;
    Ok(())
}
