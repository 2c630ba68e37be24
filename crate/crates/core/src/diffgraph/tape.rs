//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Operations are recorded eagerly on a linear tape during the forward pass;
//! `backward` replays the tape in strict reverse order, accumulating adjoints
//! by the chain rule. The op set is deliberately small: exactly what a
//! filtering rollout with Gaussian algebra needs (matrix products, Cholesky
//! factors, triangular solves, log-determinants and elementwise maps).
//!
//! A tape is single-writer. Forward values of every node stay available after
//! recording; `backward` consumes the tape (a second call is an error).

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Recorded operation. Parents are earlier tape entries.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// out = c * a for a compile-time constant c.
    Scale(NodeId, f64),
    /// out = s * a where `s` is a 1x1 node.
    MulScalar { s: NodeId, a: NodeId },
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Transpose(NodeId),
    /// Sum of all entries, 1x1.
    Sum(NodeId),
    /// Mean of all entries, 1x1.
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    /// Lower Cholesky factor of a symmetric matrix (lower triangle is read);
    /// `jitter` records what was added to the diagonal at record time.
    Cholesky { a: NodeId, jitter: f64 },
    /// Solve `L x = b` (or `L^T x = b` when `transpose_l`) for lower-triangular L.
    TriSolve { l: NodeId, b: NodeId, transpose_l: bool },
    /// `log det(L L^T) = 2 sum(log diag L)` for a lower-triangular factor.
    LogDetFromChol(NodeId),
    /// x^T A x for a column vector x, 1x1.
    QuadForm { a: NodeId, x: NodeId },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice { x: NodeId, row0: usize, rows: usize, col0: usize, cols: usize },
    /// Unconstrained square matrix -> lower-triangular factor with
    /// exponentiated (hence positive) diagonal. Upper triangle is ignored.
    TrilExpDiag(NodeId),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Gradient map produced by [`Tape::backward`]: leaf name → dense gradient.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, DMatrix<f64>>,
}

impl Gradients {
    /// Gradient for a named leaf; zero-shaped leaves that the root does not
    /// depend on are present with all-zero entries.
    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DMatrix<f64>)> {
        self.map.iter()
    }

    /// Euclidean norm over all gradient entries.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|m| m.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Recording tape. See module docs.
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    consumed: bool,
    base_jitter: f64,
    ones_cache: HashMap<(usize, usize), NodeId>,
    eye_cache: HashMap<usize, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
            consumed: false,
            base_jitter: linalg::DEFAULT_JITTER,
            ones_cache: HashMap::new(),
            eye_cache: HashMap::new(),
        }
    }

    pub fn with_jitter(base_jitter: f64) -> Self {
        let mut t = Self::new();
        t.base_jitter = base_jitter;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id.idx()].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.nrows(), v.ncols())
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.nrows() == 1 && v.ncols() == 1 {
            Ok(v[(0, 0)])
        } else {
            Err(Error::ShapeMismatch {
                op: "scalar",
                detail: format!("expected 1x1, got {}x{}", v.nrows(), v.ncols()),
            })
        }
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op });
        id
    }

    /// Register a named parameter leaf. Names must be unique per tape.
    pub fn leaf(&mut self, name: &str, value: DMatrix<f64>) -> Result<NodeId> {
        if !linalg::all_finite(&value) {
            return Err(Error::NonFinite {
                context: format!("leaf `{name}`"),
            });
        }
        if self.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate leaf name `{name}`"
            )));
        }
        let id = self.push(value, Op::Leaf);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Cached all-ones constant.
    pub fn ones(&mut self, rows: usize, cols: usize) -> NodeId {
        if let Some(&id) = self.ones_cache.get(&(rows, cols)) {
            return id;
        }
        let id = self.constant(DMatrix::from_element(rows, cols, 1.0));
        self.ones_cache.insert((rows, cols), id);
        id
    }

    /// Cached identity constant.
    pub fn eye(&mut self, n: usize) -> NodeId {
        if let Some(&id) = self.eye_cache.get(&n) {
            return id;
        }
        let id = self.constant(DMatrix::identity(n, n));
        self.eye_cache.insert(n, id);
        id
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("subtract", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("elementwise-multiply", a, b)?;
        let v = self.value(a).component_mul(self.value(b));
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Multiply matrix `a` by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        let sv = self.scalar(s)?;
        let v = self.value(a) * sv;
        Ok(self.push(v, Op::MulScalar { s, a }))
    }

    fn matmul_flags(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("({m}x{k1}) * ({k2}x{n}) with ta={ta}, tb={tb}"),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let v = match (ta, tb) {
            (false, false) => av * bv,
            (true, false) => av.transpose() * bv,
            (false, true) => av * bv.transpose(),
            (true, true) => av.transpose() * bv.transpose(),
        };
        Ok(self.push(v, Op::Matmul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, false)
    }

    /// `a^T b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, true, false)
    }

    /// `a b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, true)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        self.push(DMatrix::from_element(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.iter().sum::<f64>() / (v.len() as f64);
        self.push(DMatrix::from_element(1, 1, s), Op::Mean(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument(
                "elementwise-log of non-positive entry".into(),
            ));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    /// Elementwise square root. Entries in [-1e-10, 0) are treated as exact
    /// zeros (covariance round-off); anything more negative is an error.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        const NEG_TOL: f64 = -1e-10;
        let src = self.value(a);
        let mut v = src.clone();
        for (i, e) in v.iter_mut().enumerate() {
            if *e < NEG_TOL {
                return Err(Error::InvalidArgument(format!(
                    "sqrt of negative entry {e:.3e} at flat index {i}"
                )));
            }
            *e = e.max(0.0).sqrt();
        }
        Ok(self.push(v, Op::Sqrt(a)))
    }

    /// Lower Cholesky factor with jitter escalation (see module docs of
    /// [`crate::linalg`]). The jitter actually used is recorded on the node.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "cholesky",
                detail: format!("{r}x{c} not square"),
            });
        }
        let jc = linalg::cholesky_jittered(self.value(a), self.base_jitter)?;
        Ok(self.push(jc.factor, Op::Cholesky { a, jitter: jc.jitter_used }))
    }

    /// Solve `L x = b` for a lower-triangular factor `L`.
    pub fn tri_solve_lower(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        self.tri_solve(l, b, false)
    }

    /// Solve `L^T x = b` for a lower-triangular factor `L`.
    pub fn tri_solve_lower_t(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        self.tri_solve(l, b, true)
    }

    fn tri_solve(&mut self, l: NodeId, b: NodeId, transpose_l: bool) -> Result<NodeId> {
        let (lr, lc) = self.shape(l);
        let (br, _) = self.shape(b);
        if lr != lc || lr != br {
            return Err(Error::ShapeMismatch {
                op: "lower-triangular-solve",
                detail: format!("L {lr}x{lc}, b has {br} rows"),
            });
        }
        let v = if transpose_l {
            linalg::solve_lower_transpose(self.value(l), self.value(b))
        } else {
            linalg::solve_lower(self.value(l), self.value(b))
        };
        Ok(self.push(v, Op::TriSolve { l, b, transpose_l }))
    }

    /// `log det(A)` given the lower Cholesky factor of `A`.
    pub fn logdet_from_chol(&mut self, l: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(l);
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "log-determinant-via-cholesky",
                detail: format!("{r}x{c} not square"),
            });
        }
        let lv = self.value(l);
        for i in 0..r {
            if lv[(i, i)] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "non-positive factor diagonal at {i}"
                )));
            }
        }
        let s: f64 = (0..r).map(|i| 2.0 * lv[(i, i)].ln()).sum();
        Ok(self.push(DMatrix::from_element(1, 1, s), Op::LogDetFromChol(l)))
    }

    /// Convenience: `log det(A)` of a symmetric positive-definite node.
    pub fn logdet_spd(&mut self, a: NodeId) -> Result<NodeId> {
        let l = self.cholesky(a)?;
        self.logdet_from_chol(l)
    }

    /// `x^T A x` for a column vector node `x`.
    pub fn quad_form(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (xr, xc) = self.shape(x);
        if ar != ac || xr != ar || xc != 1 {
            return Err(Error::ShapeMismatch {
                op: "quadratic-form",
                detail: format!("A {ar}x{ac}, x {xr}x{xc}"),
            });
        }
        let av = self.value(a);
        let xv = self.value(x);
        let v = (xv.transpose() * av * xv)[(0, 0)];
        Ok(self.push(DMatrix::from_element(1, 1, v), Op::QuadForm { a, x }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concatenate of zero parts".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concatenate",
                    detail: format!("row counts differ: {rows} vs {r}"),
                });
            }
            cols += c;
        }
        let mut v = DMatrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            v.view_mut((0, c0), (rows, pv.ncols())).copy_from(pv);
            c0 += pv.ncols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concatenate of zero parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concatenate",
                    detail: format!("column counts differ: {cols} vs {c}"),
                });
            }
            rows += r;
        }
        let mut v = DMatrix::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let pv = self.value(p);
            v.view_mut((r0, 0), (pv.nrows(), cols)).copy_from(pv);
            r0 += pv.nrows();
        }
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if row0 + rows > r || col0 + cols > c || rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("[{row0}..{}, {col0}..{}] of {r}x{c}", row0 + rows, col0 + cols),
            });
        }
        let v = self.value(x).view((row0, col0), (rows, cols)).into_owned();
        Ok(self.push(v, Op::Slice { x, row0, rows, col0, cols }))
    }

    /// Map an unconstrained square matrix to a lower-triangular factor whose
    /// diagonal is exponentiated (strictly positive by construction).
    pub fn tril_exp_diag(&mut self, w: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(w);
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "tril-exp-diag",
                detail: format!("{r}x{c} not square"),
            });
        }
        let wv = self.value(w);
        let mut v = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..i {
                v[(i, j)] = wv[(i, j)];
            }
            v[(i, i)] = wv[(i, i)].exp();
        }
        Ok(self.push(v, Op::TrilExpDiag(w)))
    }

    /// Sum a list of 1x1 (or equally shaped) nodes.
    pub fn sum_nodes(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("sum of zero nodes".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar root; returns gradients for every leaf.
    /// Adjoints accumulate in strict reverse tape order, which makes the
    /// result reproducible bit-for-bit.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("root must be 1x1, got {r}x{c}"),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adjoints: Vec<Option<DMatrix<f64>>> = (0..n).map(|_| None).collect();
        adjoints[root.idx()] = Some(DMatrix::from_element(1, 1, 1.0));

        for i in (0..=root.idx()).rev() {
            let Some(g) = adjoints[i].take() else { continue };
            self.visit(NodeId(i as u32), &g, &mut adjoints);
            // Re-store for leaves so the final collection sees it.
            if matches!(self.nodes[i].op, Op::Leaf) {
                adjoints[i] = Some(g);
            }
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.leaves {
            let g = adjoints[id.idx()]
                .take()
                .unwrap_or_else(|| DMatrix::zeros(self.shape(*id).0, self.shape(*id).1));
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }

    fn accumulate(adjoints: &mut [Option<DMatrix<f64>>], id: NodeId, inc: DMatrix<f64>) {
        match &mut adjoints[id.idx()] {
            Some(acc) => *acc += inc,
            slot @ None => *slot = Some(inc),
        }
    }

    /// Push the adjoint `g` of node `id` into its parents.
    fn visit(&self, id: NodeId, g: &DMatrix<f64>, adjoints: &mut [Option<DMatrix<f64>>]) {
        let node = &self.nodes[id.idx()];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                Self::accumulate(adjoints, *a, g.clone());
                Self::accumulate(adjoints, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(adjoints, *a, g.clone());
                Self::accumulate(adjoints, *b, -g);
            }
            Op::Hadamard(a, b) => {
                Self::accumulate(adjoints, *a, g.component_mul(self.value(*b)));
                Self::accumulate(adjoints, *b, g.component_mul(self.value(*a)));
            }
            Op::Scale(a, c) => {
                Self::accumulate(adjoints, *a, g * *c);
            }
            Op::MulScalar { s, a } => {
                let sv = self.value(*s)[(0, 0)];
                let ds: f64 = g.iter().zip(self.value(*a).iter()).map(|(x, y)| x * y).sum();
                Self::accumulate(adjoints, *s, DMatrix::from_element(1, 1, ds));
                Self::accumulate(adjoints, *a, g * sv);
            }
            Op::Matmul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (g * bv.transpose(), av.transpose() * g),
                    (true, false) => (bv * g.transpose(), av * g),
                    (false, true) => (g * bv, g.transpose() * av),
                    (true, true) => (bv.transpose() * g.transpose(), g.transpose() * av.transpose()),
                };
                Self::accumulate(adjoints, *a, ga);
                Self::accumulate(adjoints, *b, gb);
            }
            Op::Transpose(a) => {
                Self::accumulate(adjoints, *a, g.transpose());
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                Self::accumulate(adjoints, *a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let scale = g[(0, 0)] / ((r * c) as f64);
                Self::accumulate(adjoints, *a, DMatrix::from_element(r, c, scale));
            }
            Op::Exp(a) => {
                Self::accumulate(adjoints, *a, g.component_mul(&node.value));
            }
            Op::Log(a) => {
                Self::accumulate(adjoints, *a, g.component_div(self.value(*a)));
            }
            Op::Sqrt(a) => {
                // d sqrt(x) = g / (2 sqrt(x)); a 0/0 (clamped zero with zero
                // upstream) contributes nothing.
                let mut inc = g.clone();
                for (gi, yi) in inc.iter_mut().zip(node.value.iter()) {
                    if *gi == 0.0 && *yi == 0.0 {
                        continue;
                    }
                    *gi = 0.5 * *gi / *yi;
                }
                Self::accumulate(adjoints, *a, inc);
            }
            Op::Cholesky { a, .. } => {
                let l = &node.value;
                let n = l.nrows();
                // Mask upstream to the lower triangle; upper entries of L are
                // structural zeros.
                let mut lbar = g.clone();
                for i in 0..n {
                    for j in (i + 1)..n {
                        lbar[(i, j)] = 0.0;
                    }
                }
                // S = L^{-T} phi(L^T lbar) L^{-1}, phi = tril with halved diag.
                let mut w = l.transpose() * &lbar;
                for i in 0..n {
                    w[(i, i)] *= 0.5;
                    for j in (i + 1)..n {
                        w[(i, j)] = 0.0;
                    }
                }
                let y = linalg::solve_lower_transpose(l, &w);
                let s = linalg::solve_lower_transpose(l, &y.transpose()).transpose();
                // Forward reads only the lower triangle of A, so fold the
                // symmetric sensitivity onto it.
                let mut abar = DMatrix::zeros(n, n);
                for i in 0..n {
                    abar[(i, i)] = s[(i, i)];
                    for j in 0..i {
                        abar[(i, j)] = s[(i, j)] + s[(j, i)];
                    }
                }
                Self::accumulate(adjoints, *a, abar);
            }
            Op::TriSolve { l, b, transpose_l } => {
                let lv = self.value(*l);
                let x = &node.value;
                let n = lv.nrows();
                let (gb, mut gl) = if !*transpose_l {
                    // x = L^{-1} b
                    let gb = linalg::solve_lower_transpose(lv, g);
                    let gl = -(&gb * x.transpose());
                    (gb, gl)
                } else {
                    // x = L^{-T} b
                    let gb = linalg::solve_lower(lv, g);
                    let gl = -(x * gb.transpose());
                    (gb, gl)
                };
                for i in 0..n {
                    for j in (i + 1)..n {
                        gl[(i, j)] = 0.0;
                    }
                }
                Self::accumulate(adjoints, *b, gb);
                Self::accumulate(adjoints, *l, gl);
            }
            Op::LogDetFromChol(l) => {
                let lv = self.value(*l);
                let n = lv.nrows();
                let mut gl = DMatrix::zeros(n, n);
                for i in 0..n {
                    gl[(i, i)] = 2.0 * g[(0, 0)] / lv[(i, i)];
                }
                Self::accumulate(adjoints, *l, gl);
            }
            Op::QuadForm { a, x } => {
                let av = self.value(*a);
                let xv = self.value(*x);
                let gs = g[(0, 0)];
                Self::accumulate(adjoints, *a, xv * xv.transpose() * gs);
                Self::accumulate(adjoints, *x, (av + av.transpose()) * xv * gs);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let inc = g.view((0, c0), (r, c)).into_owned();
                    Self::accumulate(adjoints, p, inc);
                    c0 += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let inc = g.view((r0, 0), (r, c)).into_owned();
                    Self::accumulate(adjoints, p, inc);
                    r0 += r;
                }
            }
            Op::Slice { x, row0, rows, col0, cols } => {
                let (r, c) = self.shape(*x);
                let mut inc = DMatrix::zeros(r, c);
                inc.view_mut((*row0, *col0), (*rows, *cols)).copy_from(g);
                Self::accumulate(adjoints, *x, inc);
            }
            Op::TrilExpDiag(w) => {
                let n = node.value.nrows();
                let mut gw = DMatrix::zeros(n, n);
                for i in 0..n {
                    gw[(i, i)] = g[(i, i)] * node.value[(i, i)];
                    for j in 0..i {
                        gw[(i, j)] = g[(i, j)];
                    }
                }
                Self::accumulate(adjoints, *w, gw);
            }
        }
    }

    /// Recompute every node from its parents and verify the stored values
    /// bit-for-bit. The recursion is deterministic, so this must hold.
    pub fn replay_matches(&self) -> bool {
        for i in 0..self.nodes.len() {
            let expected = &self.nodes[i].value;
            let recomputed = match self.recompute(i) {
                Some(v) => v,
                None => continue, // leaves/constants hold their own value
            };
            if recomputed.nrows() != expected.nrows() || recomputed.ncols() != expected.ncols() {
                return false;
            }
            if recomputed
                .iter()
                .zip(expected.iter())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return false;
            }
        }
        true
    }

    fn recompute(&self, i: usize) -> Option<DMatrix<f64>> {
        let v = |id: NodeId| self.value(id);
        Some(match &self.nodes[i].op {
            Op::Leaf | Op::Constant => return None,
            Op::Add(a, b) => v(*a) + v(*b),
            Op::Sub(a, b) => v(*a) - v(*b),
            Op::Hadamard(a, b) => v(*a).component_mul(v(*b)),
            Op::Scale(a, c) => v(*a) * *c,
            Op::MulScalar { s, a } => v(*a) * v(*s)[(0, 0)],
            Op::Matmul { a, b, ta, tb } => match (ta, tb) {
                (false, false) => v(*a) * v(*b),
                (true, false) => v(*a).transpose() * v(*b),
                (false, true) => v(*a) * v(*b).transpose(),
                (true, true) => v(*a).transpose() * v(*b).transpose(),
            },
            Op::Transpose(a) => v(*a).transpose(),
            Op::Sum(a) => DMatrix::from_element(1, 1, v(*a).iter().sum()),
            Op::Mean(a) => {
                DMatrix::from_element(1, 1, v(*a).iter().sum::<f64>() / v(*a).len() as f64)
            }
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Sqrt(a) => v(*a).map(|x| x.max(0.0).sqrt()),
            Op::Cholesky { a, jitter } => {
                let mut aj = v(*a).clone();
                for d in 0..aj.nrows() {
                    aj[(d, d)] += jitter;
                }
                linalg::cholesky_lower(&aj).ok()?
            }
            Op::TriSolve { l, b, transpose_l } => {
                if *transpose_l {
                    linalg::solve_lower_transpose(v(*l), v(*b))
                } else {
                    linalg::solve_lower(v(*l), v(*b))
                }
            }
            Op::LogDetFromChol(l) => {
                DMatrix::from_element(1, 1, linalg::logdet_from_chol(v(*l)))
            }
            Op::QuadForm { a, x } => {
                DMatrix::from_element(1, 1, (v(*x).transpose() * v(*a) * v(*x))[(0, 0)])
            }
            Op::ConcatCols(parts) => {
                let rows = v(parts[0]).nrows();
                let cols = parts.iter().map(|&p| v(p).ncols()).sum();
                let mut out = DMatrix::zeros(rows, cols);
                let mut c0 = 0;
                for &p in parts {
                    out.view_mut((0, c0), (rows, v(p).ncols())).copy_from(v(p));
                    c0 += v(p).ncols();
                }
                out
            }
            Op::ConcatRows(parts) => {
                let cols = v(parts[0]).ncols();
                let rows = parts.iter().map(|&p| v(p).nrows()).sum();
                let mut out = DMatrix::zeros(rows, cols);
                let mut r0 = 0;
                for &p in parts {
                    out.view_mut((r0, 0), (v(p).nrows(), cols)).copy_from(v(p));
                    r0 += v(p).nrows();
                }
                out
            }
            Op::Slice { x, row0, rows, col0, cols } => {
                v(*x).view((*row0, *col0), (*rows, *cols)).into_owned()
            }
            Op::TrilExpDiag(w) => {
                let wv = v(*w);
                let n = wv.nrows();
                let mut out = DMatrix::zeros(n, n);
                for r in 0..n {
                    for c2 in 0..r {
                        out[(r, c2)] = wv[(r, c2)];
                    }
                    out[(r, r)] = wv[(r, r)].exp();
                }
                out
            }
        })
    }
}
