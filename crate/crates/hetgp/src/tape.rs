//! Reverse-mode automatic differentiation on a small operation tape.
//!
//! The training objective is built once per step as a Wengert list of
//! matrix-level operations (kernel matrices, Cholesky factors, triangular
//! solves, the analytic kernel-expectation statistics) plus scalar glue.
//! Values are computed eagerly on construction; [`Tape::backward`] then runs
//! the adjoint pass and exposes gradients with respect to the parameter
//! leaves. Gradient correctness is pinned by central finite differences in
//! the test suite.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{sigmoid, softplus};
use crate::variational::cholesky_with_jitter;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub enum Value {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> f64 {
        match self {
            Value::Scalar(v) => *v,
            _ => panic!("expected scalar value"),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        match self {
            Value::Vector(v) => v,
            _ => panic!("expected vector value"),
        }
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        match self {
            Value::Matrix(v) => v,
            _ => panic!("expected matrix value"),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    // scalar ops
    AddS(usize, usize),
    SubS(usize, usize),
    MulS(usize, usize),
    DivS(usize, usize),
    NegS(usize),
    LnS(usize),
    SoftplusS(usize),
    // vector ops
    AddV(usize, usize),
    SubV(usize, usize),
    ScaleV(usize, usize),
    SumV(usize),
    DotV(usize, usize),
    LnV(usize),
    SoftplusV(usize),
    BroadcastS(usize),
    MatVec(usize, usize),
    MatTVec(usize, usize),
    SolveLowerVec(usize, usize),
    SolveLowerTVec(usize, usize),
    ColSumSq(usize),
    IndexV(usize, usize),
    IndexM(usize, usize, usize),
    // matrix ops
    Transpose(usize),
    MatTMul(usize, usize),
    MatMulNt(usize, usize),
    SolveLower(usize, usize),
    /// node id plus the jitter fraction actually applied to the mean
    /// diagonal, needed for the exact pullback
    CholJitter(usize, f64),
    AssembleLower(usize, usize),
    HstackCols(Vec<usize>),
    Trace(usize),
    FrobInner(usize, usize),
    LnDiagSum(usize),
    SeKernel {
        scale_raw: usize,
        ls_raw: usize,
        x: usize,
        y: usize,
    },
    Psi1 {
        scale_raw: usize,
        ls_raw: usize,
        mu: usize,
        nu: usize,
        z: usize,
    },
    Psi2Sum {
        scale_raw: usize,
        ls_raw: usize,
        mu: usize,
        nu: usize,
        z: usize,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Build the objective through the methods, then call
/// [`Tape::backward`] on the scalar root.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn scalar(&self, v: Var) -> f64 {
        match &self.grads[v.0] {
            Some(Value::Scalar(g)) => *g,
            None => 0.0,
            _ => panic!("expected scalar gradient"),
        }
    }

    pub fn vector(&self, v: Var, len: usize) -> DVector<f64> {
        match &self.grads[v.0] {
            Some(Value::Vector(g)) => g.clone(),
            None => DVector::zeros(len),
            _ => panic!("expected vector gradient"),
        }
    }

    pub fn matrix(&self, v: Var, rows: usize, cols: usize) -> DMatrix<f64> {
        match &self.grads[v.0] {
            Some(Value::Matrix(g)) => g.clone(),
            None => DMatrix::zeros(rows, cols),
            _ => panic!("expected matrix gradient"),
        }
    }
}

fn tril_mut(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            m[(i, j)] = 0.0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_scalar()
    }

    fn push(&mut self, value: Value, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn scalar_param(&mut self, v: f64) -> Var {
        self.push(Value::Scalar(v), Op::Leaf, true)
    }

    pub fn vector_param(&mut self, v: DVector<f64>) -> Var {
        self.push(Value::Vector(v), Op::Leaf, true)
    }

    pub fn matrix_param(&mut self, v: DMatrix<f64>) -> Var {
        self.push(Value::Matrix(v), Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Value::Scalar(v), Op::Leaf, false)
    }

    pub fn vector_const(&mut self, v: DVector<f64>) -> Var {
        self.push(Value::Vector(v), Op::Leaf, false)
    }

    pub fn matrix_const(&mut self, v: DMatrix<f64>) -> Var {
        self.push(Value::Matrix(v), Op::Leaf, false)
    }

    // ---- scalar algebra -----------------------------------------------

    pub fn add_s(&mut self, a: Var, b: Var) -> Var {
        let v = self.scalar_value(a) + self.scalar_value(b);
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Scalar(v), Op::AddS(a.0, b.0), g)
    }

    pub fn sub_s(&mut self, a: Var, b: Var) -> Var {
        let v = self.scalar_value(a) - self.scalar_value(b);
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Scalar(v), Op::SubS(a.0, b.0), g)
    }

    pub fn mul_s(&mut self, a: Var, b: Var) -> Var {
        let v = self.scalar_value(a) * self.scalar_value(b);
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Scalar(v), Op::MulS(a.0, b.0), g)
    }

    pub fn div_s(&mut self, a: Var, b: Var) -> Var {
        let v = self.scalar_value(a) / self.scalar_value(b);
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Scalar(v), Op::DivS(a.0, b.0), g)
    }

    pub fn neg_s(&mut self, a: Var) -> Var {
        let v = -self.scalar_value(a);
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::NegS(a.0), g)
    }

    pub fn ln_s(&mut self, a: Var) -> Var {
        let v = self.scalar_value(a).ln();
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::LnS(a.0), g)
    }

    pub fn softplus_s(&mut self, a: Var) -> Var {
        let v = softplus(self.scalar_value(a));
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::SoftplusS(a.0), g)
    }

    /// Convenience: sums a slice of scalar vars (zero for an empty slice).
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Var {
        match vars.split_first() {
            None => self.scalar_const(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &v in rest {
                    acc = self.add_s(acc, v);
                }
                acc
            }
        }
    }

    // ---- vector algebra -----------------------------------------------

    pub fn add_v(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).as_vector() + self.value(b).as_vector();
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Vector(v), Op::AddV(a.0, b.0), g)
    }

    pub fn sub_v(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).as_vector() - self.value(b).as_vector();
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Vector(v), Op::SubV(a.0, b.0), g)
    }

    pub fn scale_v(&mut self, s: Var, v: Var) -> Var {
        let out = self.value(v).as_vector() * self.scalar_value(s);
        let g = self.ng(&[s.0, v.0]);
        self.push(Value::Vector(out), Op::ScaleV(s.0, v.0), g)
    }

    pub fn sum_v(&mut self, a: Var) -> Var {
        let v = self.value(a).as_vector().sum();
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::SumV(a.0), g)
    }

    pub fn dot_v(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).as_vector().dot(self.value(b).as_vector());
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Scalar(v), Op::DotV(a.0, b.0), g)
    }

    pub fn ln_v(&mut self, a: Var) -> Var {
        let v = self.value(a).as_vector().map(|x| x.ln());
        let g = self.ng(&[a.0]);
        self.push(Value::Vector(v), Op::LnV(a.0), g)
    }

    pub fn softplus_v(&mut self, a: Var) -> Var {
        let v = self.value(a).as_vector().map(softplus);
        let g = self.ng(&[a.0]);
        self.push(Value::Vector(v), Op::SoftplusV(a.0), g)
    }

    /// Vector with `len` copies of the scalar `s`.
    pub fn broadcast_s(&mut self, s: Var, len: usize) -> Var {
        let v = DVector::from_element(len, self.scalar_value(s));
        let g = self.ng(&[s.0]);
        self.push(Value::Vector(v), Op::BroadcastS(s.0), g)
    }

    /// `A x`
    pub fn mat_vec(&mut self, a: Var, x: Var) -> Var {
        let v = self.value(a).as_matrix() * self.value(x).as_vector();
        let g = self.ng(&[a.0, x.0]);
        self.push(Value::Vector(v), Op::MatVec(a.0, x.0), g)
    }

    /// `A^T x`
    pub fn mat_t_vec(&mut self, a: Var, x: Var) -> Var {
        let v = self.value(a).as_matrix().transpose() * self.value(x).as_vector();
        let g = self.ng(&[a.0, x.0]);
        self.push(Value::Vector(v), Op::MatTVec(a.0, x.0), g)
    }

    /// `L^-1 b` for lower-triangular `L`.
    pub fn solve_lower_vec(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = self
            .value(l)
            .as_matrix()
            .solve_lower_triangular(self.value(b).as_vector())
            .ok_or_else(|| Error::numerical("triangular solve", "zero diagonal"))?;
        let g = self.ng(&[l.0, b.0]);
        Ok(self.push(Value::Vector(v), Op::SolveLowerVec(l.0, b.0), g))
    }

    /// `L^-T b` for lower-triangular `L`.
    pub fn solve_lower_t_vec(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = self
            .value(l)
            .as_matrix()
            .tr_solve_lower_triangular(self.value(b).as_vector())
            .ok_or_else(|| Error::numerical("triangular solve", "zero diagonal"))?;
        let g = self.ng(&[l.0, b.0]);
        Ok(self.push(Value::Vector(v), Op::SolveLowerTVec(l.0, b.0), g))
    }

    /// Reads one vector entry as a scalar node.
    pub fn index_v(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).as_vector()[i];
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::IndexV(a.0, i), g)
    }

    /// Reads one matrix entry as a scalar node.
    pub fn index_m(&mut self, a: Var, i: usize, j: usize) -> Var {
        let v = self.value(a).as_matrix()[(i, j)];
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::IndexM(a.0, i, j), g)
    }

    /// Per-column sum of squares of a matrix.
    pub fn col_sum_sq(&mut self, a: Var) -> Var {
        let m = self.value(a).as_matrix();
        let v = DVector::from_fn(m.ncols(), |j, _| m.column(j).norm_squared());
        let g = self.ng(&[a.0]);
        self.push(Value::Vector(v), Op::ColSumSq(a.0), g)
    }

    // ---- matrix algebra -----------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).as_matrix().transpose();
        let g = self.ng(&[a.0]);
        self.push(Value::Matrix(v), Op::Transpose(a.0), g)
    }

    /// `A^T B`
    pub fn mat_t_mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).as_matrix().transpose() * self.value(b).as_matrix();
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Matrix(v), Op::MatTMul(a.0, b.0), g)
    }

    /// `A B^T`
    pub fn mat_mul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).as_matrix() * self.value(b).as_matrix().transpose();
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Matrix(v), Op::MatMulNt(a.0, b.0), g)
    }

    /// `L^-1 B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = self
            .value(l)
            .as_matrix()
            .solve_lower_triangular(self.value(b).as_matrix())
            .ok_or_else(|| Error::numerical("triangular solve", "zero diagonal"))?;
        let g = self.ng(&[l.0, b.0]);
        Ok(self.push(Value::Matrix(v), Op::SolveLower(l.0, b.0), g))
    }

    /// Cholesky factor of a symmetric PSD matrix with escalating jitter.
    pub fn cholesky(&mut self, a: Var, context: &str) -> Result<Var> {
        let m = self.value(a).as_matrix();
        let n = m.nrows();
        let mean_diag = if n > 0 { m.diagonal().sum() / n as f64 } else { 0.0 };
        let (l, jitter) = cholesky_with_jitter(m, context)?;
        // the applied jitter scales with the mean diagonal, so that
        // dependence enters the pullback
        let fraction = if mean_diag > 0.0 { jitter / mean_diag } else { 0.0 };
        let g = self.ng(&[a.0]);
        Ok(self.push(Value::Matrix(l), Op::CholJitter(a.0, fraction), g))
    }

    /// Builds a lower-triangular matrix from its (positive) diagonal and the
    /// packed strict lower triangle (row-major: `(1,0), (2,0), (2,1), ...`).
    pub fn assemble_lower(&mut self, diag: Var, off: Var) -> Var {
        let d = self.value(diag).as_vector().clone();
        let o = self.value(off).as_vector();
        let m = d.len();
        let mut l = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..i {
                l[(i, j)] = o[k];
                k += 1;
            }
            l[(i, i)] = d[i];
        }
        let g = self.ng(&[diag.0, off.0]);
        self.push(Value::Matrix(l), Op::AssembleLower(diag.0, off.0), g)
    }

    /// Stacks column vectors into an `N x D` matrix.
    pub fn hstack_cols(&mut self, cols: &[Var]) -> Var {
        assert!(!cols.is_empty());
        let n = self.value(cols[0]).as_vector().len();
        let mut m = DMatrix::zeros(n, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            m.set_column(j, self.value(c).as_vector());
        }
        let ids: Vec<usize> = cols.iter().map(|c| c.0).collect();
        let g = self.ng(&ids);
        self.push(Value::Matrix(m), Op::HstackCols(ids), g)
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let v = self.value(a).as_matrix().trace();
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::Trace(a.0), g)
    }

    /// Frobenius inner product `sum_ij A_ij B_ij`.
    pub fn frob_inner(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .as_matrix()
            .zip_fold(self.value(b).as_matrix(), 0.0, |acc, x, y| acc + x * y);
        let g = self.ng(&[a.0, b.0]);
        self.push(Value::Scalar(v), Op::FrobInner(a.0, b.0), g)
    }

    /// `sum_i ln(L_ii)`.
    pub fn ln_diag_sum(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .as_matrix()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum();
        let g = self.ng(&[a.0]);
        self.push(Value::Scalar(v), Op::LnDiagSum(a.0), g)
    }

    // ---- kernel ops -----------------------------------------------------

    fn se_constrained(&self, scale_raw: Var, ls_raw: Var) -> (f64, DVector<f64>) {
        let vf = softplus(self.scalar_value(scale_raw));
        let alphas = self.value(ls_raw).as_vector().map(|r| {
            let l = softplus(r);
            1.0 / (l * l)
        });
        (vf, alphas)
    }

    /// Squared-exponential cross-kernel between row-point matrices `x` and
    /// `y`, parameterized by unconstrained scale and lengthscales.
    pub fn se_kernel(&mut self, scale_raw: Var, ls_raw: Var, x: Var, y: Var) -> Var {
        let (vf, alphas) = self.se_constrained(scale_raw, ls_raw);
        let xm = self.value(x).as_matrix();
        let ym = self.value(y).as_matrix();
        let (n, m) = (xm.nrows(), ym.nrows());
        let mut k = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let mut quad = 0.0;
                for d in 0..xm.ncols() {
                    let r = xm[(i, d)] - ym[(j, d)];
                    quad += alphas[d] * r * r;
                }
                k[(i, j)] = vf * (-0.5 * quad).exp();
            }
        }
        let g = self.ng(&[scale_raw.0, ls_raw.0, x.0, y.0]);
        self.push(
            Value::Matrix(k),
            Op::SeKernel {
                scale_raw: scale_raw.0,
                ls_raw: ls_raw.0,
                x: x.0,
                y: y.0,
            },
            g,
        )
    }

    /// Expected kernel vector under per-row Gaussian inputs: returns the
    /// `N x M` matrix with entry `(i, j) = E[k(x_i, z_j)]` for
    /// `x_i ~ N(mu_i, diag(nu_i))`.
    pub fn psi1(&mut self, scale_raw: Var, ls_raw: Var, mu: Var, nu: Var, z: Var) -> Var {
        let (vf, alphas) = self.se_constrained(scale_raw, ls_raw);
        let mum = self.value(mu).as_matrix();
        let num = self.value(nu).as_matrix();
        let zm = self.value(z).as_matrix();
        let (n, m) = (mum.nrows(), zm.nrows());
        let mut phi = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let mut v = vf;
                for d in 0..zm.ncols() {
                    let a = alphas[d];
                    let c = a * num[(i, d)] + 1.0;
                    let r = mum[(i, d)] - zm[(j, d)];
                    v *= (-0.5 * a * r * r / c).exp() / c.sqrt();
                }
                phi[(i, j)] = v;
            }
        }
        let g = self.ng(&[scale_raw.0, ls_raw.0, mu.0, nu.0, z.0]);
        self.push(
            Value::Matrix(phi),
            Op::Psi1 {
                scale_raw: scale_raw.0,
                ls_raw: ls_raw.0,
                mu: mu.0,
                nu: nu.0,
                z: z.0,
            },
            g,
        )
    }

    /// Sum over rows of the expected kernel-product matrices:
    /// `sum_i E[k(x_i, Z) k(x_i, Z)^T]` for `x_i ~ N(mu_i, diag(nu_i))`.
    pub fn psi2_sum(&mut self, scale_raw: Var, ls_raw: Var, mu: Var, nu: Var, z: Var) -> Var {
        let (vf, alphas) = self.se_constrained(scale_raw, ls_raw);
        let mum = self.value(mu).as_matrix();
        let num = self.value(nu).as_matrix();
        let zm = self.value(z).as_matrix();
        let (n, m) = (mum.nrows(), zm.nrows());
        let mut out = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..m {
                for jp in j..m {
                    let mut v = vf * vf;
                    for d in 0..zm.ncols() {
                        let a = alphas[d];
                        let c = 2.0 * a * num[(i, d)] + 1.0;
                        let s = zm[(j, d)] - zm[(jp, d)];
                        let zbar = 0.5 * (zm[(j, d)] + zm[(jp, d)]);
                        let r = mum[(i, d)] - zbar;
                        v *= (-0.25 * a * s * s - a * r * r / c).exp() / c.sqrt();
                    }
                    out[(j, jp)] += v;
                    if jp != j {
                        out[(jp, j)] += v;
                    }
                }
            }
        }
        let g = self.ng(&[scale_raw.0, ls_raw.0, mu.0, nu.0, z.0]);
        self.push(
            Value::Matrix(out),
            Op::Psi2Sum {
                scale_raw: scale_raw.0,
                ls_raw: ls_raw.0,
                mu: mu.0,
                nu: nu.0,
                z: z.0,
            },
            g,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Runs the adjoint pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Value::Scalar(1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn add_scalar_grad(&self, grads: &mut [Option<Value>], node: usize, g: f64) {
        if !self.nodes[node].needs_grad {
            return;
        }
        match &mut grads[node] {
            Some(Value::Scalar(acc)) => *acc += g,
            slot @ None => *slot = Some(Value::Scalar(g)),
            _ => panic!("gradient kind mismatch"),
        }
    }

    fn add_vector_grad(&self, grads: &mut [Option<Value>], node: usize, g: DVector<f64>) {
        if !self.nodes[node].needs_grad {
            return;
        }
        match &mut grads[node] {
            Some(Value::Vector(acc)) => *acc += g,
            slot @ None => *slot = Some(Value::Vector(g)),
            _ => panic!("gradient kind mismatch"),
        }
    }

    fn add_matrix_grad(&self, grads: &mut [Option<Value>], node: usize, g: DMatrix<f64>) {
        if !self.nodes[node].needs_grad {
            return;
        }
        match &mut grads[node] {
            Some(Value::Matrix(acc)) => *acc += g,
            slot @ None => *slot = Some(Value::Matrix(g)),
            _ => panic!("gradient kind mismatch"),
        }
    }

    fn vec_of(&self, id: usize) -> &DVector<f64> {
        self.nodes[id].value.as_vector()
    }

    fn mat_of(&self, id: usize) -> &DMatrix<f64> {
        self.nodes[id].value.as_matrix()
    }

    fn scal_of(&self, id: usize) -> f64 {
        self.nodes[id].value.as_scalar()
    }

    fn propagate(&self, idx: usize, g: &Value, grads: &mut [Option<Value>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::AddS(a, b) => {
                let g = g.as_scalar();
                self.add_scalar_grad(grads, *a, g);
                self.add_scalar_grad(grads, *b, g);
            }
            Op::SubS(a, b) => {
                let g = g.as_scalar();
                self.add_scalar_grad(grads, *a, g);
                self.add_scalar_grad(grads, *b, -g);
            }
            Op::MulS(a, b) => {
                let g = g.as_scalar();
                self.add_scalar_grad(grads, *a, g * self.scal_of(*b));
                self.add_scalar_grad(grads, *b, g * self.scal_of(*a));
            }
            Op::DivS(a, b) => {
                let g = g.as_scalar();
                let bv = self.scal_of(*b);
                self.add_scalar_grad(grads, *a, g / bv);
                self.add_scalar_grad(grads, *b, -g * self.scal_of(*a) / (bv * bv));
            }
            Op::NegS(a) => self.add_scalar_grad(grads, *a, -g.as_scalar()),
            Op::LnS(a) => self.add_scalar_grad(grads, *a, g.as_scalar() / self.scal_of(*a)),
            Op::SoftplusS(a) => {
                self.add_scalar_grad(grads, *a, g.as_scalar() * sigmoid(self.scal_of(*a)))
            }
            Op::AddV(a, b) => {
                let g = g.as_vector();
                self.add_vector_grad(grads, *a, g.clone());
                self.add_vector_grad(grads, *b, g.clone());
            }
            Op::SubV(a, b) => {
                let g = g.as_vector();
                self.add_vector_grad(grads, *a, g.clone());
                self.add_vector_grad(grads, *b, -g);
            }
            Op::ScaleV(s, v) => {
                let g = g.as_vector();
                self.add_scalar_grad(grads, *s, g.dot(self.vec_of(*v)));
                self.add_vector_grad(grads, *v, g * self.scal_of(*s));
            }
            Op::SumV(a) => {
                let n = self.vec_of(*a).len();
                self.add_vector_grad(grads, *a, DVector::from_element(n, g.as_scalar()));
            }
            Op::DotV(a, b) => {
                let g = g.as_scalar();
                self.add_vector_grad(grads, *a, self.vec_of(*b) * g);
                self.add_vector_grad(grads, *b, self.vec_of(*a) * g);
            }
            Op::LnV(a) => {
                let g = g.as_vector();
                let grad = DVector::from_fn(g.len(), |i, _| g[i] / self.vec_of(*a)[i]);
                self.add_vector_grad(grads, *a, grad);
            }
            Op::SoftplusV(a) => {
                let g = g.as_vector();
                let grad = DVector::from_fn(g.len(), |i, _| g[i] * sigmoid(self.vec_of(*a)[i]));
                self.add_vector_grad(grads, *a, grad);
            }
            Op::BroadcastS(s) => self.add_scalar_grad(grads, *s, g.as_vector().sum()),
            Op::MatVec(a, x) => {
                let g = g.as_vector();
                self.add_matrix_grad(grads, *a, g * self.vec_of(*x).transpose());
                self.add_vector_grad(grads, *x, self.mat_of(*a).transpose() * g);
            }
            Op::MatTVec(a, x) => {
                let g = g.as_vector();
                self.add_matrix_grad(grads, *a, self.vec_of(*x) * g.transpose());
                self.add_vector_grad(grads, *x, self.mat_of(*a) * g);
            }
            Op::SolveLowerVec(l, b) => {
                // c = L^-1 b:  b_bar = L^-T c_bar,  L_bar = -tril(b_bar c^T)
                let c = self.vec_of(idx);
                let lm = self.mat_of(*l);
                let b_bar = lm.tr_solve_lower_triangular(g.as_vector()).unwrap();
                let mut l_bar = -(&b_bar * c.transpose());
                tril_mut(&mut l_bar);
                self.add_matrix_grad(grads, *l, l_bar);
                self.add_vector_grad(grads, *b, b_bar);
            }
            Op::SolveLowerTVec(l, b) => {
                // c = L^-T b:  b_bar = L^-1 c_bar,  L_bar = -tril(c b_bar^T)
                let c = self.vec_of(idx);
                let lm = self.mat_of(*l);
                let b_bar = lm.solve_lower_triangular(g.as_vector()).unwrap();
                let mut l_bar = -(c * b_bar.transpose());
                tril_mut(&mut l_bar);
                self.add_matrix_grad(grads, *l, l_bar);
                self.add_vector_grad(grads, *b, b_bar);
            }
            Op::ColSumSq(a) => {
                let g = g.as_vector();
                let m = self.mat_of(*a);
                let grad = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| 2.0 * m[(i, j)] * g[j]);
                self.add_matrix_grad(grads, *a, grad);
            }
            Op::IndexV(a, i) => {
                let mut grad = DVector::zeros(self.vec_of(*a).len());
                grad[*i] = g.as_scalar();
                self.add_vector_grad(grads, *a, grad);
            }
            Op::IndexM(a, i, j) => {
                let m = self.mat_of(*a);
                let mut grad = DMatrix::zeros(m.nrows(), m.ncols());
                grad[(*i, *j)] = g.as_scalar();
                self.add_matrix_grad(grads, *a, grad);
            }
            Op::Transpose(a) => self.add_matrix_grad(grads, *a, g.as_matrix().transpose()),
            Op::MatTMul(a, b) => {
                // C = A^T B:  A_bar = B G^T,  B_bar = A G
                let g = g.as_matrix();
                self.add_matrix_grad(grads, *a, self.mat_of(*b) * g.transpose());
                self.add_matrix_grad(grads, *b, self.mat_of(*a) * g);
            }
            Op::MatMulNt(a, b) => {
                // C = A B^T:  A_bar = G B,  B_bar = G^T A
                let g = g.as_matrix();
                self.add_matrix_grad(grads, *a, g * self.mat_of(*b));
                self.add_matrix_grad(grads, *b, g.transpose() * self.mat_of(*a));
            }
            Op::SolveLower(l, b) => {
                // C = L^-1 B:  B_bar = L^-T G,  L_bar = -tril(B_bar C^T)
                let c = self.mat_of(idx);
                let lm = self.mat_of(*l);
                let b_bar = lm.tr_solve_lower_triangular(g.as_matrix()).unwrap();
                let mut l_bar = -(&b_bar * c.transpose());
                tril_mut(&mut l_bar);
                self.add_matrix_grad(grads, *l, l_bar);
                self.add_matrix_grad(grads, *b, b_bar);
            }
            Op::CholJitter(a, fraction) => {
                // standard Cholesky pullback, symmetrized for a symmetric input
                let l = self.mat_of(idx);
                let g = g.as_matrix();
                let mut p = l.transpose() * g;
                tril_mut(&mut p);
                for i in 0..p.nrows() {
                    p[(i, i)] *= 0.5;
                }
                // S = L^-T P L^-1
                let t1 = l.tr_solve_lower_triangular(&p).unwrap();
                let s_t = l.tr_solve_lower_triangular(&t1.transpose()).unwrap();
                let mut a_bar = (&s_t + s_t.transpose()) * 0.5;
                // the jitter added in the forward pass was
                // fraction * mean(diag(A)), itself a function of A
                if *fraction > 0.0 {
                    let n = a_bar.nrows();
                    let extra = *fraction * a_bar.trace() / n as f64;
                    for i in 0..n {
                        a_bar[(i, i)] += extra;
                    }
                }
                self.add_matrix_grad(grads, *a, a_bar);
            }
            Op::AssembleLower(diag, off) => {
                let g = g.as_matrix();
                let m = g.nrows();
                let d_bar = DVector::from_fn(m, |i, _| g[(i, i)]);
                let mut o_bar = DVector::zeros(m * (m - 1) / 2);
                let mut k = 0;
                for i in 0..m {
                    for j in 0..i {
                        o_bar[k] = g[(i, j)];
                        k += 1;
                    }
                }
                self.add_vector_grad(grads, *diag, d_bar);
                self.add_vector_grad(grads, *off, o_bar);
            }
            Op::HstackCols(cols) => {
                let g = g.as_matrix();
                for (j, &c) in cols.iter().enumerate() {
                    self.add_vector_grad(grads, c, g.column(j).into_owned());
                }
            }
            Op::Trace(a) => {
                let n = self.mat_of(*a).nrows();
                self.add_matrix_grad(grads, *a, DMatrix::identity(n, n) * g.as_scalar());
            }
            Op::FrobInner(a, b) => {
                let g = g.as_scalar();
                self.add_matrix_grad(grads, *a, self.mat_of(*b) * g);
                self.add_matrix_grad(grads, *b, self.mat_of(*a) * g);
            }
            Op::LnDiagSum(a) => {
                let m = self.mat_of(*a);
                let g = g.as_scalar();
                let mut grad = DMatrix::zeros(m.nrows(), m.ncols());
                for i in 0..m.nrows() {
                    grad[(i, i)] = g / m[(i, i)];
                }
                self.add_matrix_grad(grads, *a, grad);
            }
            Op::SeKernel {
                scale_raw,
                ls_raw,
                x,
                y,
            } => self.backward_se_kernel(idx, *scale_raw, *ls_raw, *x, *y, g.as_matrix(), grads),
            Op::Psi1 {
                scale_raw,
                ls_raw,
                mu,
                nu,
                z,
            } => self.backward_psi1(idx, *scale_raw, *ls_raw, *mu, *nu, *z, g.as_matrix(), grads),
            Op::Psi2Sum {
                scale_raw,
                ls_raw,
                mu,
                nu,
                z,
            } => self.backward_psi2(*scale_raw, *ls_raw, *mu, *nu, *z, g.as_matrix(), grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_se_kernel(
        &self,
        idx: usize,
        scale_raw: usize,
        ls_raw: usize,
        x: usize,
        y: usize,
        g: &DMatrix<f64>,
        grads: &mut [Option<Value>],
    ) {
        let k = self.mat_of(idx);
        let xm = self.mat_of(x);
        let ym = self.mat_of(y);
        let (vf, alphas) = self.se_constrained(Var(scale_raw), Var(ls_raw));
        let dim = xm.ncols();

        let need_x = self.nodes[x].needs_grad;
        let need_y = self.nodes[y].needs_grad;
        let need_ls = self.nodes[ls_raw].needs_grad;
        let need_scale = self.nodes[scale_raw].needs_grad;

        let mut x_bar = if need_x {
            Some(DMatrix::zeros(xm.nrows(), dim))
        } else {
            None
        };
        let mut y_bar = if need_y {
            Some(DMatrix::zeros(ym.nrows(), dim))
        } else {
            None
        };
        let mut alpha_bar = DVector::zeros(dim);
        let mut scale_sum = 0.0;

        for i in 0..xm.nrows() {
            for j in 0..ym.nrows() {
                let gk = g[(i, j)] * k[(i, j)];
                if gk == 0.0 {
                    continue;
                }
                scale_sum += g[(i, j)] * k[(i, j)] / vf;
                for d in 0..dim {
                    let r = xm[(i, d)] - ym[(j, d)];
                    if need_ls {
                        alpha_bar[d] += gk * (-0.5 * r * r);
                    }
                    let dxdir = gk * (-alphas[d] * r);
                    if let Some(xb) = x_bar.as_mut() {
                        xb[(i, d)] += dxdir;
                    }
                    if let Some(yb) = y_bar.as_mut() {
                        yb[(j, d)] -= dxdir;
                    }
                }
            }
        }

        if need_scale {
            self.add_scalar_grad(grads, scale_raw, scale_sum * sigmoid(self.scal_of(scale_raw)));
        }
        if need_ls {
            self.add_vector_grad(grads, ls_raw, self.chain_alpha_to_raw(ls_raw, &alpha_bar));
        }
        if let Some(xb) = x_bar {
            self.add_matrix_grad(grads, x, xb);
        }
        if let Some(yb) = y_bar {
            self.add_matrix_grad(grads, y, yb);
        }
    }

    /// Chain rule from `alpha_d = softplus(raw_d)^-2` back to the raw value.
    fn chain_alpha_to_raw(&self, ls_raw: usize, alpha_bar: &DVector<f64>) -> DVector<f64> {
        let raw = self.vec_of(ls_raw);
        DVector::from_fn(raw.len(), |d, _| {
            let l = softplus(raw[d]);
            alpha_bar[d] * (-2.0 / (l * l * l)) * sigmoid(raw[d])
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_psi1(
        &self,
        idx: usize,
        scale_raw: usize,
        ls_raw: usize,
        mu: usize,
        nu: usize,
        z: usize,
        g: &DMatrix<f64>,
        grads: &mut [Option<Value>],
    ) {
        let phi = self.mat_of(idx);
        let mum = self.mat_of(mu);
        let num = self.mat_of(nu);
        let zm = self.mat_of(z);
        let (vf, alphas) = self.se_constrained(Var(scale_raw), Var(ls_raw));
        let dim = zm.ncols();

        let mut mu_bar = DMatrix::zeros(mum.nrows(), dim);
        let mut nu_bar = DMatrix::zeros(num.nrows(), dim);
        let mut z_bar = DMatrix::zeros(zm.nrows(), dim);
        let mut alpha_bar = DVector::zeros(dim);
        let mut scale_sum = 0.0;

        for i in 0..mum.nrows() {
            for j in 0..zm.nrows() {
                let gphi = g[(i, j)] * phi[(i, j)];
                if gphi == 0.0 {
                    continue;
                }
                scale_sum += g[(i, j)] * phi[(i, j)] / vf;
                for d in 0..dim {
                    let a = alphas[d];
                    let c = a * num[(i, d)] + 1.0;
                    let r = mum[(i, d)] - zm[(j, d)];
                    let dmu = gphi * (-a * r / c);
                    mu_bar[(i, d)] += dmu;
                    z_bar[(j, d)] -= dmu;
                    nu_bar[(i, d)] += gphi * (0.5 * a * a * r * r / (c * c) - 0.5 * a / c);
                    alpha_bar[d] += gphi * (-0.5 * r * r / (c * c) - 0.5 * num[(i, d)] / c);
                }
            }
        }

        self.add_scalar_grad(grads, scale_raw, scale_sum * sigmoid(self.scal_of(scale_raw)));
        let ab = self.chain_alpha_to_raw(ls_raw, &alpha_bar);
        self.add_vector_grad(grads, ls_raw, ab);
        self.add_matrix_grad(grads, mu, mu_bar);
        self.add_matrix_grad(grads, nu, nu_bar);
        self.add_matrix_grad(grads, z, z_bar);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_psi2(
        &self,
        scale_raw: usize,
        ls_raw: usize,
        mu: usize,
        nu: usize,
        z: usize,
        g: &DMatrix<f64>,
        grads: &mut [Option<Value>],
    ) {
        let mum = self.mat_of(mu);
        let num = self.mat_of(nu);
        let zm = self.mat_of(z);
        let (vf, alphas) = self.se_constrained(Var(scale_raw), Var(ls_raw));
        let dim = zm.ncols();
        let m = zm.nrows();

        let mut mu_bar = DMatrix::zeros(mum.nrows(), dim);
        let mut nu_bar = DMatrix::zeros(num.nrows(), dim);
        let mut z_bar = DMatrix::zeros(m, dim);
        let mut alpha_bar = DVector::zeros(dim);
        let mut scale_sum = 0.0;

        for i in 0..mum.nrows() {
            for j in 0..m {
                for jp in j..m {
                    // adjoint of the underlying product: both mirrored
                    // entries received it
                    let gw = if jp == j {
                        g[(j, j)]
                    } else {
                        g[(j, jp)] + g[(jp, j)]
                    };
                    if gw == 0.0 {
                        continue;
                    }
                    // recompute the forward product for this (i, j, jp)
                    let mut w = vf * vf;
                    for d in 0..dim {
                        let a = alphas[d];
                        let c = 2.0 * a * num[(i, d)] + 1.0;
                        let s = zm[(j, d)] - zm[(jp, d)];
                        let zbar = 0.5 * (zm[(j, d)] + zm[(jp, d)]);
                        let r = mum[(i, d)] - zbar;
                        w *= (-0.25 * a * s * s - a * r * r / c).exp() / c.sqrt();
                    }
                    let gww = gw * w;
                    scale_sum += 2.0 * gww / vf;
                    for d in 0..dim {
                        let a = alphas[d];
                        let c = 2.0 * a * num[(i, d)] + 1.0;
                        let s = zm[(j, d)] - zm[(jp, d)];
                        let zbar = 0.5 * (zm[(j, d)] + zm[(jp, d)]);
                        let r = mum[(i, d)] - zbar;
                        mu_bar[(i, d)] += gww * (-2.0 * a * r / c);
                        nu_bar[(i, d)] += gww * (2.0 * a * a * r * r / (c * c) - a / c);
                        z_bar[(j, d)] += gww * (-0.5 * a * s + a * r / c);
                        z_bar[(jp, d)] += gww * (0.5 * a * s + a * r / c);
                        alpha_bar[d] +=
                            gww * (-0.25 * s * s - r * r / (c * c) - num[(i, d)] / c);
                    }
                }
            }
        }

        self.add_scalar_grad(grads, scale_raw, scale_sum * sigmoid(self.scal_of(scale_raw)));
        let ab = self.chain_alpha_to_raw(ls_raw, &alpha_bar);
        self.add_vector_grad(grads, ls_raw, ab);
        self.add_matrix_grad(grads, mu, mu_bar);
        self.add_matrix_grad(grads, nu, nu_bar);
        self.add_matrix_grad(grads, z, z_bar);
    }
}
