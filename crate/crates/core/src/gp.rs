//! Sparse Gaussian-process machinery: ARD squared-exponential kernels,
//! inducing-point conditionals, the variational family over inducing outputs
//! and the initial state, and closed-form KL divergences.
//!
//! The transition function is a multi-output GP realized as `d_x` mutually
//! independent scalar GPs sharing one set of inducing inputs. Everything that
//! must be differentiated is expressed as tape compositions; thin plain
//! wrappers expose the same computations on concrete matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg;

/// Per-output-dimension ARD kernel hyperparameters, stored on log scale.
///
/// Row `d` of `log_ls` holds the input lengthscales of output dimension `d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_sf2: DMatrix<f64>, // d_x x 1
    pub log_ls: DMatrix<f64>,  // d_x x d_x
}

impl KernelParams {
    pub fn isotropic(d_x: usize, signal_variance: f64, lengthscale: f64) -> Self {
        KernelParams {
            log_sf2: DMatrix::from_element(d_x, 1, signal_variance.ln()),
            log_ls: DMatrix::from_element(d_x, d_x, lengthscale.ln()),
        }
    }

    pub fn d_x(&self) -> usize {
        self.log_sf2.nrows()
    }
}

/// Inducing inputs (shared across output dims) plus the free-form Gaussian
/// over inducing outputs: per dim `d`, `q(u_d) = N(m_d, L_d L_d^T)`.
///
/// `l_raw` holds unconstrained square matrices; the factor is the strict
/// lower triangle plus an exponentiated diagonal, so `S` is positive
/// definite by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducingSet {
    pub z: DMatrix<f64>,          // M x d_x
    pub m: DMatrix<f64>,          // M x d_x (column d = m_d)
    pub l_raw: Vec<DMatrix<f64>>, // d_x entries, M x M
}

impl InducingSet {
    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.z.ncols()
    }

    /// Concrete factor `L_d` for one output dimension.
    pub fn factor(&self, d: usize) -> DMatrix<f64> {
        tril_exp_diag_value(&self.l_raw[d])
    }
}

/// Variational initial-state distribution `q(x0) = N(m0, L0 L0^T)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialStateDist {
    pub m0: DMatrix<f64>,     // d_x x 1
    pub l0_raw: DMatrix<f64>, // d_x x d_x, unconstrained
}

impl InitialStateDist {
    pub fn factor(&self) -> DMatrix<f64> {
        tril_exp_diag_value(&self.l0_raw)
    }
}

/// Mean and covariance of a Gaussian state distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianBelief { mean, cov }
    }

    pub fn standard(d: usize) -> Self {
        GaussianBelief {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    /// Check the structural invariants: symmetry within 1e-10 and
    /// eigenvalues above -1e-8.
    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(Error::ShapeMismatch {
                op: "gaussian-belief",
                detail: format!("mean {}, cov {}x{}", d, self.cov.nrows(), self.cov.ncols()),
            });
        }
        for i in 0..d {
            for j in 0..i {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "covariance asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        let eigs = self.cov.clone().symmetric_eigenvalues();
        if eigs.iter().any(|&e| e < -1e-8) {
            return Err(Error::InvalidArgument(
                "covariance has eigenvalue below -1e-8".into(),
            ));
        }
        Ok(())
    }
}

/// How the inducing-output Gram matrix is regularized inside the transition
/// conditional: add the per-dim process noise to the diagonal, or use the
/// plain Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InducingNoise {
    Process,
    Plain,
}

fn tril_exp_diag_value(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            l[(i, j)] = w[(i, j)];
        }
        l[(i, i)] = w[(i, i)].exp();
    }
    l
}

/// Kernel hyperparameter nodes for a single output dimension.
#[derive(Debug, Clone, Copy)]
pub struct DimKernelNodes {
    pub log_sf2: NodeId, // 1x1
    pub log_ls: NodeId,  // d_x x 1
}

/// ARD squared-exponential Gram matrix between two point sets, on tape.
///
/// Entry (i, j) is `sf2 * exp(-0.5 * sum_k (x1_ik - x2_jk)^2 / ls_k^2)`.
pub fn kernel_matrix_t(
    tape: &mut Tape,
    x1: NodeId,
    x2: NodeId,
    kernel: &DimKernelNodes,
) -> Result<NodeId> {
    let (n1, dx) = tape.shape(x1);
    let (n2, dx2) = tape.shape(x2);
    if dx != dx2 {
        return Err(Error::ShapeMismatch {
            op: "kernel_matrix",
            detail: format!("inputs have {dx} vs {dx2} columns"),
        });
    }
    let neg_log_ls = tape.scale(kernel.log_ls, -1.0);
    let inv_ls = tape.exp(neg_log_ls); // d_x x 1
    let ones_n1 = tape.ones(n1, 1);
    let ones_n2 = tape.ones(n2, 1);
    // Scale columns by 1/ls, then expand the squared distance.
    let bcast1 = tape.matmul_nt(ones_n1, inv_ls)?; // n1 x d_x
    let bcast2 = tape.matmul_nt(ones_n2, inv_ls)?;
    let x1s = tape.hadamard(x1, bcast1)?;
    let x2s = tape.hadamard(x2, bcast2)?;
    let x1sq = tape.hadamard(x1s, x1s)?;
    let x2sq = tape.hadamard(x2s, x2s)?;
    let ones_dx = tape.ones(dx, 1);
    let sq1 = tape.matmul(x1sq, ones_dx)?; // n1 x 1
    let sq2 = tape.matmul(x2sq, ones_dx)?; // n2 x 1
    let cross = tape.matmul_nt(x1s, x2s)?; // n1 x n2
    let sq1b = tape.matmul_nt(sq1, ones_n2)?; // n1 x n2
    let sq2b = tape.matmul_nt(ones_n1, sq2)?; // n1 x n2
    let cross2 = tape.scale(cross, 2.0);
    let d1 = tape.add(sq1b, sq2b)?;
    let dist = tape.sub(d1, cross2)?;
    let e = tape.scale(dist, -0.5);
    let expd = tape.exp(e);
    let sf2 = tape.exp(kernel.log_sf2);
    tape.mul_scalar(sf2, expd)
}

/// Plain Gram matrix for output dimension `dim`.
pub fn kernel_matrix(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    params: &KernelParams,
    dim: usize,
) -> Result<DMatrix<f64>> {
    if !linalg::all_finite(x1) || !linalg::all_finite(x2) {
        return Err(Error::NonFinite {
            context: "kernel_matrix input".into(),
        });
    }
    let mut tape = Tape::new();
    let x1n = tape.constant(x1.clone());
    let x2n = tape.constant(x2.clone());
    let kn = register_dim_kernel(&mut tape, params, dim)?;
    let k = kernel_matrix_t(&mut tape, x1n, x2n, &kn)?;
    Ok(tape.value(k).clone())
}

/// Register one dimension's kernel hyperparameters as constants.
pub fn register_dim_kernel(
    tape: &mut Tape,
    params: &KernelParams,
    dim: usize,
) -> Result<DimKernelNodes> {
    let d_x = params.d_x();
    if dim >= d_x {
        return Err(Error::InvalidArgument(format!(
            "kernel dim {dim} out of range (d_x = {d_x})"
        )));
    }
    let d = params.log_ls.ncols();
    let log_sf2 = tape.constant(DMatrix::from_element(1, 1, params.log_sf2[(dim, 0)]));
    let log_ls = tape.constant(DMatrix::from_fn(d, 1, |i, _| params.log_ls[(dim, i)]));
    Ok(DimKernelNodes { log_sf2, log_ls })
}

/// Node bundle describing the GP transition model on one tape.
pub struct GpModelNodes {
    pub z: NodeId,       // M x d_x
    pub log_sf2: NodeId, // d_x x 1
    pub log_ls: NodeId,  // d_x x d_x
    pub log_q: NodeId,   // d_x x 1
}

/// Per-dimension pieces of the transition, hoisted once per rollout: the
/// factorized regularized Gram matrix and `A^{-1} u_d`.
pub struct PreparedGpTransition {
    pub dims: Vec<PreparedDim>,
}

pub struct PreparedDim {
    pub kernel: DimKernelNodes,
    pub z: NodeId,
    pub q: NodeId,     // 1x1, process-noise variance of this dim
    pub sf2: NodeId,   // 1x1
    pub kzz: NodeId,   // M x M Gram (no noise)
    pub l_a: NodeId,   // chol(K_zz [+ q I])
    pub alpha: NodeId, // A^{-1} u_d, M x 1
}

/// Hoist the per-dim solves conditioned on a sampled `u`.
pub fn prepare_gp_transition(
    tape: &mut Tape,
    gm: &GpModelNodes,
    u: &[NodeId],
    mode: InducingNoise,
) -> Result<PreparedGpTransition> {
    let (m_ind, d_x) = tape.shape(gm.z);
    if u.len() != d_x {
        return Err(Error::InvalidArgument(format!(
            "expected {d_x} inducing-output samples, got {}",
            u.len()
        )));
    }
    let mut dims = Vec::with_capacity(d_x);
    for d in 0..d_x {
        let log_sf2_d = tape.slice(gm.log_sf2, d, 1, 0, 1)?;
        let log_ls_row = tape.slice(gm.log_ls, d, 1, 0, d_x)?;
        let log_ls_d = tape.transpose(log_ls_row);
        let kernel = DimKernelNodes {
            log_sf2: log_sf2_d,
            log_ls: log_ls_d,
        };
        let log_q_d = tape.slice(gm.log_q, d, 1, 0, 1)?;
        let q = tape.exp(log_q_d);
        let sf2 = tape.exp(log_sf2_d);
        let kzz = kernel_matrix_t(tape, gm.z, gm.z, &kernel)?;
        let a = match mode {
            InducingNoise::Process => {
                let eye = tape.eye(m_ind);
                let qi = tape.mul_scalar(q, eye)?;
                tape.add(kzz, qi)?
            }
            InducingNoise::Plain => kzz,
        };
        let l_a = tape.cholesky(a)?;
        let w = tape.tri_solve_lower(l_a, u[d])?;
        let alpha = tape.tri_solve_lower_t(l_a, w)?;
        dims.push(PreparedDim {
            kernel,
            z: gm.z,
            q,
            sf2,
            kzz,
            l_a,
            alpha,
        });
    }
    Ok(PreparedGpTransition { dims })
}

/// Sparse-GP transition conditional for a whole particle block: returns the
/// per-particle means and diagonal variances of `p(x_t | u, x_{t-1})`.
///
/// Per dim: mean `k_{x,Z} A^{-1} u_d`, variance `sf2 + q_d - nystrom`.
pub fn gp_conditional_t(
    tape: &mut Tape,
    prep: &PreparedGpTransition,
    x_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (n, _) = tape.shape(x_prev);
    let mut means = Vec::with_capacity(prep.dims.len());
    let mut vars = Vec::with_capacity(prep.dims.len());
    let ones_n = tape.ones(n, 1);
    for dim in &prep.dims {
        let kxz = kernel_matrix_t(tape, x_prev, dim.z, &dim.kernel)?; // n x M
        let xi = tape.matmul(kxz, dim.alpha)?; // n x 1
        let kxz_t = tape.transpose(kxz);
        let v = tape.tri_solve_lower(dim.l_a, kxz_t)?; // M x n
        let vsq = tape.hadamard(v, v)?;
        let m_ind = tape.shape(dim.l_a).0;
        let ones_m = tape.ones(1, m_ind);
        let nys_row = tape.matmul(ones_m, vsq)?; // 1 x n
        let nys = tape.transpose(nys_row); // n x 1
        let head = tape.add(dim.sf2, dim.q)?; // 1x1
        let headb = tape.matmul(ones_n, head)?; // n x 1
        let var = tape.sub(headb, nys)?;
        means.push(xi);
        vars.push(var);
    }
    let mean = tape.concat_cols(&means)?;
    let var = tape.concat_cols(&vars)?;
    Ok((mean, var))
}

/// Plain single-point conditional `p(x_t | u, x_prev) = N(xi, diag(Xi))`.
pub fn sparse_gp_conditional(
    x_prev: &DVector<f64>,
    inducing: &InducingSet,
    u_sample: &DVector<f64>,
    kernel: &KernelParams,
    q_diag: &DVector<f64>,
    mode: InducingNoise,
) -> Result<GaussianBelief> {
    let d_x = inducing.d_x();
    let m_ind = inducing.num_inducing();
    if u_sample.len() != m_ind * d_x {
        return Err(Error::ShapeMismatch {
            op: "sparse_gp_conditional",
            detail: format!("u has {} entries, expected {}", u_sample.len(), m_ind * d_x),
        });
    }
    if !x_prev.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "sparse_gp_conditional x_prev".into(),
        });
    }
    let mut tape = Tape::new();
    let gm = GpModelNodes {
        z: tape.constant(inducing.z.clone()),
        log_sf2: tape.constant(kernel.log_sf2.clone()),
        log_ls: tape.constant(kernel.log_ls.clone()),
        log_q: tape.constant(DMatrix::from_fn(d_x, 1, |i, _| q_diag[i].ln())),
    };
    let u: Vec<NodeId> = (0..d_x)
        .map(|d| tape.constant(DMatrix::from_fn(m_ind, 1, |i, _| u_sample[d * m_ind + i])))
        .collect();
    let prep = prepare_gp_transition(&mut tape, &gm, &u, mode)?;
    let x_node = tape.constant(DMatrix::from_fn(1, d_x, |_, j| x_prev[j]));
    let (mean, var) = gp_conditional_t(&mut tape, &prep, x_node)?;
    let mv = tape.value(mean);
    let vv = tape.value(var);
    let mean_vec = DVector::from_fn(d_x, |i, _| mv[(0, i)]);
    let cov = DMatrix::from_fn(d_x, d_x, |i, j| if i == j { vv[(0, i)] } else { 0.0 });
    Ok(GaussianBelief::new(mean_vec, cov))
}

/// Reparameterized draw of the inducing outputs on tape:
/// `u_d = m_d + L_d eps_d` per dimension. Returns one `M x 1` node per dim.
pub fn sample_u_t(
    tape: &mut Tape,
    m: NodeId,          // M x d_x
    l_raw: &[NodeId],   // d_x of M x M
    eps: &DMatrix<f64>, // M x d_x
) -> Result<Vec<NodeId>> {
    let (m_ind, d_x) = tape.shape(m);
    if eps.nrows() != m_ind || eps.ncols() != d_x {
        return Err(Error::ShapeMismatch {
            op: "sample_variational_u",
            detail: format!("eps {}x{}, expected {m_ind}x{d_x}", eps.nrows(), eps.ncols()),
        });
    }
    let mut out = Vec::with_capacity(d_x);
    for d in 0..d_x {
        let m_d = tape.slice(m, 0, m_ind, d, 1)?;
        let l_d = tape.tril_exp_diag(l_raw[d])?;
        let eps_d = tape.constant(DMatrix::from_fn(m_ind, 1, |i, _| eps[(i, d)]));
        let le = tape.matmul(l_d, eps_d)?;
        out.push(tape.add(m_d, le)?);
    }
    Ok(out)
}

/// Plain reparameterized draw `u = m + S^{1/2} eps` over all dims, stacked
/// as `[u_1; ...; u_{d_x}]`.
pub fn sample_variational_u(inducing: &InducingSet, eps: &DVector<f64>) -> Result<DVector<f64>> {
    let m_ind = inducing.num_inducing();
    let d_x = inducing.d_x();
    if eps.len() != m_ind * d_x {
        return Err(Error::ShapeMismatch {
            op: "sample_variational_u",
            detail: format!("eps has {} entries, expected {}", eps.len(), m_ind * d_x),
        });
    }
    let mut u = DVector::zeros(m_ind * d_x);
    for d in 0..d_x {
        let l = inducing.factor(d);
        let eps_d = DVector::from_fn(m_ind, |i, _| eps[d * m_ind + i]);
        let u_d = inducing.m.column(d) + l * eps_d;
        for i in 0..m_ind {
            u[d * m_ind + i] = u_d[i];
        }
    }
    Ok(u)
}

/// Closed-form KL between multivariate Gaussians, `KL[q || p]`.
pub fn kl_gaussian(q: &GaussianBelief, p: &GaussianBelief) -> Result<f64> {
    let d = q.mean.len();
    if p.mean.len() != d {
        return Err(Error::ShapeMismatch {
            op: "kl_gaussian",
            detail: format!("dims {d} vs {}", p.mean.len()),
        });
    }
    let lq = linalg::cholesky_jittered(&q.cov, linalg::DEFAULT_JITTER)?;
    let lp = linalg::cholesky_jittered(&p.cov, linalg::DEFAULT_JITTER)?;
    let w = linalg::solve_lower(&lp.factor, &lq.factor);
    let trace: f64 = w.iter().map(|x| x * x).sum();
    let dm = DMatrix::from_fn(d, 1, |i, _| p.mean[i] - q.mean[i]);
    let wm = linalg::solve_lower(&lp.factor, &dm);
    let mah: f64 = wm.iter().map(|x| x * x).sum();
    let ld_p = linalg::logdet_from_chol(&lp.factor);
    let ld_q = linalg::logdet_from_chol(&lq.factor);
    Ok(0.5 * (trace + mah - d as f64 + ld_p - ld_q))
}

/// On-tape KL between Gaussians given their lower-triangular factor nodes:
/// `KL[N(mq, Lq Lq^T) || N(mp, Lp Lp^T)]`.
pub fn kl_gaussian_factors_t(
    tape: &mut Tape,
    mq: NodeId, // d x 1
    lq: NodeId, // d x d factor
    mp: NodeId, // d x 1
    lp: NodeId, // d x d factor
) -> Result<NodeId> {
    let d = tape.shape(mq).0;
    let w = tape.tri_solve_lower(lp, lq)?;
    let wsq = tape.hadamard(w, w)?;
    let trace = tape.sum(wsq);
    let dm = tape.sub(mp, mq)?;
    let wm = tape.tri_solve_lower(lp, dm)?;
    let wmsq = tape.hadamard(wm, wm)?;
    let mah = tape.sum(wmsq);
    let ld_p = tape.logdet_from_chol(lp)?;
    let ld_q = tape.logdet_from_chol(lq)?;
    let t1 = tape.add(trace, mah)?;
    let t2 = tape.sub(ld_p, ld_q)?;
    let t3 = tape.add(t1, t2)?;
    let minus_d = tape.constant(DMatrix::from_element(1, 1, -(d as f64)));
    let t4 = tape.add(t3, minus_d)?;
    Ok(tape.scale(t4, 0.5))
}

/// On-tape `sum_d KL[q(u_d) || N(0, K_zz_d)]`, sharing the Gram nodes that
/// the transition already computed.
pub fn kl_inducing_t(
    tape: &mut Tape,
    m: NodeId,        // M x d_x
    l_raw: &[NodeId], // d_x of M x M
    kzz: &[NodeId],   // d_x of M x M (no noise)
) -> Result<NodeId> {
    let (m_ind, d_x) = tape.shape(m);
    let mut total: Option<NodeId> = None;
    for d in 0..d_x {
        let m_d = tape.slice(m, 0, m_ind, d, 1)?;
        let lq = tape.tril_exp_diag(l_raw[d])?;
        let lp = tape.cholesky(kzz[d])?;
        let zero = tape.constant(DMatrix::zeros(m_ind, 1));
        let kl_d = kl_gaussian_factors_t(tape, m_d, lq, zero, lp)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, kl_d)?,
            None => kl_d,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("kl_inducing with d_x = 0".into()))
}

/// Plain `KL[q(u) || p(u)]` for the full inducing set.
pub fn kl_inducing(inducing: &InducingSet, kernel: &KernelParams) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(inducing.m.clone());
    let l_raw: Vec<NodeId> = inducing
        .l_raw
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let z = tape.constant(inducing.z.clone());
    let mut kzz = Vec::new();
    for d in 0..inducing.d_x() {
        let kn = register_dim_kernel(&mut tape, kernel, d)?;
        kzz.push(kernel_matrix_t(&mut tape, z, z, &kn)?);
    }
    let kl = kl_inducing_t(&mut tape, m, &l_raw, &kzz)?;
    tape.scalar(kl)
}

/// Variational posterior over the transition function value `f(x*)` per
/// output dim (process noise excluded from the variance):
/// mean `k A^{-1} m_d`, variance `k** - k A^{-1} k^T + k A^{-1} S_d A^{-1} k^T`.
pub fn posterior_f(
    xstar: &DMatrix<f64>, // n x d_x
    inducing: &InducingSet,
    kernel: &KernelParams,
    q_diag: &DVector<f64>,
    mode: InducingNoise,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = xstar.nrows();
    let d_x = inducing.d_x();
    let mut means = DMatrix::zeros(n, d_x);
    let mut vars = DMatrix::zeros(n, d_x);
    for d in 0..d_x {
        let kzz = kernel_matrix(&inducing.z, &inducing.z, kernel, d)?;
        let mut a = kzz;
        if mode == InducingNoise::Process {
            for i in 0..a.nrows() {
                a[(i, i)] += q_diag[d];
            }
        }
        let la = linalg::cholesky_jittered(&a, linalg::DEFAULT_JITTER)?;
        let kxz = kernel_matrix(xstar, &inducing.z, kernel, d)?; // n x M
        let sf2 = kernel.log_sf2[(d, 0)].exp();
        let m_d =
            DMatrix::from_column_slice(inducing.num_inducing(), 1, inducing.m.column(d).as_slice());
        let alpha = linalg::chol_solve(&la.factor, &m_d);
        let mean_d = &kxz * alpha;
        // The Nystrom and S-correction terms share the first solve.
        let v = linalg::solve_lower(&la.factor, &kxz.transpose()); // M x n
        let l_s = inducing.factor(d);
        let ainv_k = linalg::solve_lower_transpose(&la.factor, &v); // A^{-1} k^T
        let sw = l_s.transpose() * &ainv_k; // M x n
        for i in 0..n {
            let nys: f64 = v.column(i).iter().map(|x| x * x).sum();
            let corr: f64 = sw.column(i).iter().map(|x| x * x).sum();
            means[(i, d)] = mean_d[(i, 0)];
            vars[(i, d)] = sf2 - nys + corr;
        }
    }
    Ok((means, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::{grad_check, ParamMap};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn toy_inducing(rng: &mut ChaCha12Rng, m_ind: usize, d_x: usize) -> InducingSet {
        InducingSet {
            z: DMatrix::from_fn(m_ind, d_x, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            m: DMatrix::from_fn(m_ind, d_x, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            l_raw: (0..d_x)
                .map(|_| {
                    DMatrix::from_fn(m_ind, m_ind, |i, j| {
                        if i > j {
                            0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                        } else if i == j {
                            -1.0 + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                        } else {
                            0.0
                        }
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn kernel_zero_distance_gives_signal_variance() {
        let params = KernelParams::isotropic(1, 1.7, 0.9);
        let x = DMatrix::from_element(1, 1, 0.4);
        let k = kernel_matrix(&x, &x, &params, 0).unwrap();
        assert_relative_eq!(k[(0, 0)], 1.7, epsilon = 1e-12);
    }

    #[test]
    fn kernel_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = KernelParams::isotropic(2, 0.8, 1.3);
        let x = DMatrix::from_fn(5, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let k = kernel_matrix(&x, &x, &params, 1).unwrap();
        assert_relative_eq!(k.transpose(), k, epsilon = 1e-14);
    }

    #[test]
    fn kernel_unit_case_closed_form() {
        // sf2 = 1, ls = 1, |x - x'| = 1 -> exp(-1/2).
        let params = KernelParams::isotropic(1, 1.0, 1.0);
        let x1 = DMatrix::from_element(1, 1, 0.0);
        let x2 = DMatrix::from_element(1, 1, 1.0);
        let k = kernel_matrix(&x1, &x2, &params, 0).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.6065306597126334, epsilon = 1e-14);
    }

    #[test]
    fn kernel_rejects_nan_input() {
        let params = KernelParams::isotropic(1, 1.0, 1.0);
        let x = DMatrix::from_element(1, 1, f64::NAN);
        assert!(kernel_matrix(&x, &x, &params, 0).is_err());
    }

    #[test]
    fn kernel_gram_with_jitter_is_positive_definite() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = KernelParams::isotropic(1, 1.0, 0.7);
        let x = DMatrix::from_fn(8, 1, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let mut k = kernel_matrix(&x, &x, &params, 0).unwrap();
        for i in 0..8 {
            k[(i, i)] += 1e-6;
        }
        assert!(crate::linalg::cholesky_lower(&k).is_ok());
    }

    #[test]
    fn conditional_interpolates_inducing_point_in_noise_free_limit() {
        let inducing = InducingSet {
            z: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            m: DMatrix::zeros(2, 1),
            l_raw: vec![DMatrix::from_diagonal_element(2, 2, -2.3)],
        };
        let kernel = KernelParams::isotropic(1, 1.0, 1.0);
        let u = DVector::from_column_slice(&[1.0, -1.0]);
        let x = DVector::from_element(1, 0.0); // coincides with z_0
        let q = DVector::from_element(1, 1e-12);
        let belief =
            sparse_gp_conditional(&x, &inducing, &u, &kernel, &q, InducingNoise::Process).unwrap();
        assert_relative_eq!(belief.mean[0], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn conditional_zero_u_gives_zero_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let inducing = toy_inducing(&mut rng, 4, 2);
        let kernel = KernelParams::isotropic(2, 1.0, 1.0);
        let u = DVector::zeros(8);
        let x = DVector::from_column_slice(&[0.3, -0.2]);
        let q = DVector::from_element(2, 0.05);
        let belief =
            sparse_gp_conditional(&x, &inducing, &u, &kernel, &q, InducingNoise::Process).unwrap();
        assert_relative_eq!(belief.mean.norm(), 0.0, epsilon = 1e-12);
    }

    /// Dense-conditioning oracle: condition the joint Gaussian over
    /// (f(x*), u) assembled with explicit matrices and an explicit inverse.
    #[test]
    fn conditional_matches_dense_gaussian_conditioning() {
        let inducing = InducingSet {
            z: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            m: DMatrix::zeros(2, 1),
            l_raw: vec![DMatrix::from_diagonal_element(2, 2, -2.3)],
        };
        let kernel = KernelParams::isotropic(1, 1.0, 1.0);
        let q = 0.05;
        let u = DVector::from_column_slice(&[1.0, -1.0]);
        let x_star = 0.5;

        // Oracle: joint over (f* + noise, u observed with noise q).
        let k = |a: f64, b: f64| (-0.5 * (a - b) * (a - b)).exp();
        let z = [0.0, 1.0];
        let mut cov_uu = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                cov_uu[(i, j)] = k(z[i], z[j]) + if i == j { q } else { 0.0 };
            }
        }
        let cov_fu = DMatrix::from_fn(1, 2, |_, j| k(x_star, z[j]));
        let var_f = k(x_star, x_star) + q;
        let inv = cov_uu.try_inverse().unwrap();
        let mean_oracle = (&cov_fu * &inv * &u)[(0, 0)];
        let var_oracle = var_f - (&cov_fu * &inv * cov_fu.transpose())[(0, 0)];

        let belief = sparse_gp_conditional(
            &DVector::from_element(1, x_star),
            &inducing,
            &u,
            &kernel,
            &DVector::from_element(1, q),
            InducingNoise::Process,
        )
        .unwrap();
        assert_relative_eq!(belief.mean[0], mean_oracle, epsilon = 1e-10);
        assert_relative_eq!(belief.cov[(0, 0)], var_oracle, epsilon = 1e-10);
    }

    #[test]
    fn conditional_variance_never_below_process_noise() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let inducing = toy_inducing(&mut rng, 6, 1);
        let kernel = KernelParams::isotropic(1, 1.4, 0.8);
        let q = DVector::from_element(1, 0.05);
        for _ in 0..50 {
            let x =
                DVector::from_element(1, rng.sample::<f64, _>(rand_distr::StandardNormal) * 3.0);
            let u = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let b = sparse_gp_conditional(&x, &inducing, &u, &kernel, &q, InducingNoise::Process)
                .unwrap();
            assert!(b.cov[(0, 0)] >= q[0] - 1e-10, "var {} < q", b.cov[(0, 0)]);
        }
    }

    #[test]
    fn sample_u_zero_eps_returns_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let inducing = toy_inducing(&mut rng, 3, 2);
        let eps = DVector::zeros(6);
        let u = sample_variational_u(&inducing, &eps).unwrap();
        for d in 0..2 {
            for i in 0..3 {
                assert_relative_eq!(u[d * 3 + i], inducing.m[(i, d)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn sample_u_identity_factor_adds_eps() {
        // l_raw = 0 everywhere -> strict lower 0, diag exp(0) = 1 -> L = I.
        let inducing = InducingSet {
            z: DMatrix::zeros(3, 1),
            m: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            l_raw: vec![DMatrix::zeros(3, 3)],
        };
        let eps = DVector::from_column_slice(&[0.5, -0.5, 0.25]);
        let u = sample_variational_u(&inducing, &eps).unwrap();
        assert_eq!(u.as_slice(), &[1.5, 1.5, 3.25]);
    }

    #[test]
    fn sample_u_monte_carlo_covariance_matches_s() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let inducing = toy_inducing(&mut rng, 3, 1);
        let l = inducing.factor(0);
        let s_true = &l * l.transpose();
        let n = 100_000;
        let mut mean = DVector::zeros(3);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let u = sample_variational_u(&inducing, &eps).unwrap();
            mean += &u;
            samples.push(u);
        }
        mean /= n as f64;
        let mut acc = DMatrix::zeros(3, 3);
        for u in &samples {
            let d = u - &mean;
            acc += &d * d.transpose();
        }
        acc /= (n - 1) as f64;
        let diff = (&acc - &s_true).norm() / s_true.norm();
        assert!(diff < 0.02, "MC covariance off by {diff}");
    }

    #[test]
    fn kl_identical_gaussians_is_zero() {
        let q = GaussianBelief::standard(3);
        let kl = kl_gaussian(&q, &q).unwrap();
        assert!(kl.abs() < 1e-9 && kl >= -1e-10, "kl = {kl}");
    }

    #[test]
    fn kl_mean_shift_closed_form() {
        let q = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::identity(1, 1));
        let p = GaussianBelief::standard(1);
        assert_relative_eq!(kl_gaussian(&q, &p).unwrap(), 0.5, epsilon = 1e-5);
    }

    #[test]
    fn kl_variance_mismatch_closed_form() {
        let q = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 2.0));
        let p = GaussianBelief::standard(1);
        assert_relative_eq!(
            kl_gaussian(&q, &p).unwrap(),
            0.15342640972002733,
            epsilon = 1e-5
        );
    }

    #[test]
    fn kl_inducing_zero_when_q_equals_prior() {
        // Choose l_raw so that L L^T = K_zz exactly and m = 0.
        let kernel = KernelParams::isotropic(1, 1.0, 1.0);
        let z = DMatrix::from_row_slice(3, 1, &[0.0, 0.7, 1.9]);
        let kzz = kernel_matrix(&z, &z, &kernel, 0).unwrap();
        let l = crate::linalg::cholesky_lower(&kzz).unwrap();
        let mut l_raw = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..i {
                l_raw[(i, j)] = l[(i, j)];
            }
            l_raw[(i, i)] = l[(i, i)].ln();
        }
        let inducing = InducingSet {
            z,
            m: DMatrix::zeros(3, 1),
            l_raw: vec![l_raw],
        };
        let kl = kl_inducing(&inducing, &kernel).unwrap();
        assert!(kl.abs() < 1e-9, "kl = {kl}");

        // Perturbing the mean strictly increases the KL.
        let mut shifted = inducing.clone();
        shifted.m[(0, 0)] = 0.5;
        assert!(kl_inducing(&shifted, &kernel).unwrap() > kl + 1e-3);
    }

    #[test]
    fn kl_inducing_matches_dense_kl_on_assembled_blocks() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let kernel = KernelParams::isotropic(1, 1.2, 0.9);
        let inducing = toy_inducing(&mut rng, 2, 1);
        let got = kl_inducing(&inducing, &kernel).unwrap();

        // Oracle: generic KL on explicit assembled matrices.
        let l = inducing.factor(0);
        let q = GaussianBelief::new(
            DVector::from_column_slice(inducing.m.column(0).as_slice()),
            &l * l.transpose(),
        );
        let kzz = kernel_matrix(&inducing.z, &inducing.z, &kernel, 0).unwrap();
        let p = GaussianBelief::new(DVector::zeros(2), kzz);
        let want = kl_gaussian(&q, &p).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-5);
    }

    #[test]
    fn kl_inducing_gradients_pass_grad_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let m_ind = 3;
        let mut point = ParamMap::new();
        point.insert(
            "z".into(),
            DMatrix::from_fn(m_ind, 1, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        );
        point.insert(
            "m".into(),
            DMatrix::from_fn(m_ind, 1, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        );
        point.insert(
            "l_raw".into(),
            DMatrix::from_fn(m_ind, m_ind, |i, j| {
                if i >= j {
                    -0.5 + 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    0.0
                }
            }),
        );
        point.insert("log_sf2".into(), DMatrix::from_element(1, 1, 0.1));
        point.insert("log_ls".into(), DMatrix::from_element(1, 1, -0.2));

        let err = grad_check(
            |t, ids| {
                let kn = DimKernelNodes {
                    log_sf2: ids["log_sf2"],
                    log_ls: ids["log_ls"],
                };
                let kzz = kernel_matrix_t(t, ids["z"], ids["z"], &kn)?;
                kl_inducing_t(t, ids["m"], &[ids["l_raw"]], &[kzz])
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
