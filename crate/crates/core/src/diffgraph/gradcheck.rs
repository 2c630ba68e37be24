//! Central-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Named parameter point for [`grad_check`].
pub type ParamMap = BTreeMap<String, DMatrix<f64>>;

/// Handles of the registered leaves, passed to the builder closure.
pub type LeafIds = BTreeMap<String, NodeId>;

/// Compare the tape gradient of a scalar-valued builder against central
/// finite differences at `point`.
///
/// Returns `max_i |autodiff_i - cd_i| / (|cd_i| + 1e-12)` over all
/// coordinates of all parameters. A non-finite function value at any
/// perturbation is an error naming the offending coordinate.
pub fn grad_check<F>(build: F, point: &ParamMap, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &LeafIds) -> Result<NodeId>,
{
    let eval_root = |p: &ParamMap| -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let mut ids = LeafIds::new();
        for (k, v) in p {
            ids.insert(k.clone(), tape.leaf(k, v.clone())?);
        }
        let root = build(&mut tape, &ids)?;
        Ok((tape, root))
    };

    let (mut tape, root) = eval_root(point)?;
    let f0 = tape.scalar(root)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check base point".into(),
        });
    }
    let grads = tape.backward(root)?;

    let eval = |p: &ParamMap, coord: &str| -> Result<f64> {
        let (t, r) = eval_root(p)?;
        let v = t.scalar(r)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check perturbation {coord}"),
            });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (name, base) in point {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        for i in 0..base.len() {
            let mut plus = point.clone();
            plus.get_mut(name).unwrap()[i] += step;
            let mut minus = point.clone();
            minus.get_mut(name).unwrap()[i] -= step;
            let coord = format!("{name}[{i}]");
            let fp = eval(&plus, &coord)?;
            let fm = eval(&minus, &coord)?;
            let cd = (fp - fm) / (2.0 * step);
            let rel = (g[i] - cd).abs() / (cd.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
