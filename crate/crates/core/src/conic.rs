//! Conic programs over a product of PSD blocks and one second-order cone, and
//! a primal-dual interior-point solver for them.
//!
//! A [`ConicProgram`] is
//!
//! ```text
//! minimize    c . y + eps * t
//! subject to  y_0 = 1
//!             L_j(y) >= 0          (each PSD block j)
//!             t >= ||y||           (only when eps > 0)
//! ```
//!
//! where `y` is a tms. With `y_0` fixed the free variables are
//! `(y_1, ..., y_{m-1}, t)` and the problem is brought to the form
//! `min c'x s.t. h - Gx = s in K`. The solver runs a homogeneous self-dual
//! embedding with Nesterov-Todd scaling and a Mehrotra predictor-corrector,
//! so dual and primal infeasibility are detected from certificates.
//!
//! The dual of the program is the SOS problem: maximize `gamma` such that
//! `f - q - gamma = sum_j g_j * sigma_j` with `||vec(q)|| <= eps`, the Gram
//! matrices of `sigma_j` being the PSD block multipliers.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::moments::{LinearMatrixMap, Tms};
use crate::polynomials::{basis_len, MonomialBasis, Polynomial};
use crate::{Error, Result};

const STEP_FRACTION: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            gap_tol: 1e-8,
            feas_tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.gap_tol > 0.0 && self.feas_tol > 0.0) {
            return Err(Error::InvalidConfig("solver tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Optimal,
    /// The objective is unbounded below; `ConicSolution::ray` holds an
    /// improving direction.
    PrimalUnbounded,
    Infeasible,
    MaxIterations,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::PrimalUnbounded => "primal_unbounded",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

/// A moment relaxation in conic form. The equality `y_0 = 1` is implicit.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    nvars: usize,
    degree: usize,
    c: Vec<f64>,
    epsilon: f64,
    psd_blocks: Vec<LinearMatrixMap>,
}

impl ConicProgram {
    /// `c` is indexed by the graded basis of `(nvars, degree)`.
    pub fn new(
        nvars: usize,
        degree: usize,
        c: Vec<f64>,
        epsilon: f64,
        psd_blocks: Vec<LinearMatrixMap>,
    ) -> Result<Self> {
        let m = basis_len(nvars, degree);
        if c.len() != m {
            return Err(Error::PointLength {
                expected: m,
                got: c.len(),
            });
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {epsilon}")));
        }
        for b in &psd_blocks {
            if b.nvars() != nvars {
                return Err(Error::VariableMismatch {
                    left: nvars,
                    right: b.nvars(),
                });
            }
            if let Some(p) = b.max_position() {
                if p >= m {
                    return Err(Error::DegreeOverflow {
                        degree: b.max_degree(),
                        limit: degree,
                    });
                }
            }
        }
        Ok(ConicProgram {
            nvars,
            degree,
            c,
            epsilon,
            psd_blocks,
        })
    }

    /// Length of the tms variable.
    pub fn m(&self) -> usize {
        self.c.len()
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn psd_blocks(&self) -> &[LinearMatrixMap] {
        &self.psd_blocks
    }

    /// `c . y + eps * ||y||` at a tms.
    pub fn objective_at(&self, y: &Tms) -> f64 {
        let cy: f64 = self.c.iter().zip(y.values()).map(|(a, b)| a * b).sum();
        cy + self.epsilon * y.norm()
    }
}

/// Dual multipliers of the second-order cone: `eta >= ||q||`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocDual {
    pub eta: f64,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Primal tms (last iterate when not optimal).
    pub y: Tms,
    /// Epigraph variable for `||y||`; equals `||y||` when `eps = 0`.
    pub t: f64,
    pub objective: f64,
    pub dual_objective: f64,
    /// Gram matrices, one per PSD block.
    pub gram: Vec<DMatrix<f64>>,
    pub soc_dual: Option<SocDual>,
    /// Multiplier of `y_0 = 1`, i.e. the SOS lower bound `gamma`.
    pub gamma: f64,
    /// `|objective - dual_objective| / (1 + |objective|)`.
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Improving direction in `y` when the status is `PrimalUnbounded`.
    pub ray: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Cone vectors and scalings
// ---------------------------------------------------------------------------

/// An element of `S^{s_1} x ... x S^{s_k} x Q^{m+1}`.
#[derive(Debug, Clone)]
struct ConeVec {
    psd: Vec<DMatrix<f64>>,
    soc: Option<DVector<f64>>,
}

impl ConeVec {
    fn zeros_like(&self) -> ConeVec {
        ConeVec {
            psd: self.psd.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
            soc: self.soc.as_ref().map(|v| DVector::zeros(v.len())),
        }
    }

    fn identity_like(&self) -> ConeVec {
        ConeVec {
            psd: self.psd.iter().map(|m| DMatrix::identity(m.nrows(), m.ncols())).collect(),
            soc: self.soc.as_ref().map(|v| {
                let mut e = DVector::zeros(v.len());
                e[0] = 1.0;
                e
            }),
        }
    }

    fn dot(&self, other: &ConeVec) -> f64 {
        let mut acc: f64 = self.psd.iter().zip(&other.psd).map(|(a, b)| a.dot(b)).sum();
        if let (Some(a), Some(b)) = (&self.soc, &other.soc) {
            acc += a.dot(b);
        }
        acc
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, a: f64, other: &ConeVec) {
        for (x, y) in self.psd.iter_mut().zip(&other.psd) {
            *x += y * a;
        }
        if let (Some(x), Some(y)) = (&mut self.soc, &other.soc) {
            x.axpy(a, y, 1.0);
        }
    }

    fn scaled(&self, a: f64) -> ConeVec {
        let mut out = self.zeros_like();
        out.axpy(a, self);
        out
    }

    /// Jordan product `u o v`.
    fn jordan(&self, other: &ConeVec) -> ConeVec {
        ConeVec {
            psd: self
                .psd
                .iter()
                .zip(&other.psd)
                .map(|(u, v)| (u * v + v * u) * 0.5)
                .collect(),
            soc: match (&self.soc, &other.soc) {
                (Some(u), Some(v)) => {
                    let mut out = DVector::zeros(u.len());
                    out[0] = u.dot(v);
                    for i in 1..u.len() {
                        out[i] = u[0] * v[i] + v[0] * u[i];
                    }
                    Some(out)
                }
                _ => None,
            },
        }
    }

    /// `max(-lambda_min)` over the blocks: how far outside the cone.
    fn max_violation(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for m in &self.psd {
            let min = SymmetricEigen::new(m.clone())
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(-min);
        }
        if let Some(v) = &self.soc {
            worst = worst.max(v.rows(1, v.len() - 1).norm() - v[0]);
        }
        worst
    }
}

/// Nesterov-Todd scaling of one PSD block: `W(Z) = r^T Z r`,
/// `W^{-T}(S) = r^{-1} S r^{-T}`, both equal to `diag(lambda)`.
struct PsdScaling {
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl PsdScaling {
    fn new(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<Self> {
        let ls = Cholesky::new(s.clone())?.l();
        // L_s^T Z L_s = V diag(lambda^2) V^T
        let inner = ls.transpose() * z * &ls;
        let eig = SymmetricEigen::try_new(inner, f64::EPSILON, 0)?;
        let lambda = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
        if lambda.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return None;
        }
        let isqrt = DMatrix::from_diagonal(&lambda.map(|l| 1.0 / l.sqrt()));
        let r = &ls * &eig.eigenvectors * &isqrt;
        // r^T Z r = diag(lambda)
        let rinv = DMatrix::from_diagonal(&lambda.map(|l| 1.0 / l)) * r.transpose() * z;
        Some(PsdScaling { r, rinv, lambda })
    }

    fn identity(n: usize) -> Self {
        PsdScaling {
            r: DMatrix::identity(n, n),
            rinv: DMatrix::identity(n, n),
            lambda: DVector::from_element(n, 1.0),
        }
    }

    fn w(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.r.transpose() * z * &self.r
    }
    fn wt(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r * u * self.r.transpose()
    }
    fn winv(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.rinv.transpose() * u * &self.rinv
    }
    fn winvt(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        &self.rinv * s * self.rinv.transpose()
    }
    /// `(W^T W)^{-1}` as the congruence with `P^{-1} = r^{-T} r^{-1}`.
    fn pinv(&self) -> DMatrix<f64> {
        self.rinv.transpose() * &self.rinv
    }
}

/// Nesterov-Todd scaling of the second-order cone, `W = beta (2 v v^T - J)`.
struct SocScaling {
    beta: f64,
    v: DVector<f64>,
    lambda: DVector<f64>,
}

fn jnorm_sq(u: &DVector<f64>) -> f64 {
    let tail = u.rows(1, u.len() - 1).norm();
    (u[0] - tail) * (u[0] + tail)
}

fn jmul(u: &DVector<f64>) -> DVector<f64> {
    let mut out = -u;
    out[0] = u[0];
    out
}

impl SocScaling {
    fn new(s: &DVector<f64>, z: &DVector<f64>) -> Option<Self> {
        let (js, jz) = (jnorm_sq(s), jnorm_sq(z));
        if !(js > 0.0 && jz > 0.0 && s[0] > 0.0 && z[0] > 0.0) {
            return None;
        }
        let beta = (js / jz).powf(0.25);
        let sbar = s / js.sqrt();
        let zbar = z / jz.sqrt();
        let gamma = ((1.0 + sbar.dot(&zbar)) / 2.0).sqrt();
        let wbar = (&sbar + jmul(&zbar)) / (2.0 * gamma);
        let mut v = wbar.clone();
        v[0] += 1.0;
        v /= (2.0 * (wbar[0] + 1.0)).sqrt();
        let mut scaling = SocScaling {
            beta,
            v,
            lambda: DVector::zeros(0),
        };
        scaling.lambda = scaling.w(z);
        if !scaling.lambda.iter().all(|x| x.is_finite()) {
            return None;
        }
        Some(scaling)
    }

    fn identity(n: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[0] = 1.0;
        SocScaling {
            beta: 1.0,
            v: v.clone(),
            lambda: v,
        }
    }

    fn w(&self, z: &DVector<f64>) -> DVector<f64> {
        (&self.v * (2.0 * self.v.dot(z)) - jmul(z)) * self.beta
    }

    fn winv(&self, u: &DVector<f64>) -> DVector<f64> {
        let jv = jmul(&self.v);
        (&jv * (2.0 * jv.dot(u)) - jmul(u)) / self.beta
    }

    fn winv_dense(&self) -> DMatrix<f64> {
        let n = self.v.len();
        let jv = jmul(&self.v);
        let mut m = &jv * jv.transpose() * 2.0;
        m[(0, 0)] -= 1.0;
        for i in 1..n {
            m[(i, i)] += 1.0;
        }
        m / self.beta
    }
}

struct Scaling {
    psd: Vec<PsdScaling>,
    soc: Option<SocScaling>,
}

impl Scaling {
    fn new(s: &ConeVec, z: &ConeVec) -> Option<Self> {
        let psd = s
            .psd
            .iter()
            .zip(&z.psd)
            .map(|(s, z)| PsdScaling::new(s, z))
            .collect::<Option<Vec<_>>>()?;
        let soc = match (&s.soc, &z.soc) {
            (Some(s), Some(z)) => Some(SocScaling::new(s, z)?),
            _ => None,
        };
        Some(Scaling { psd, soc })
    }

    fn identity(shape: &ConeVec) -> Self {
        Scaling {
            psd: shape.psd.iter().map(|m| PsdScaling::identity(m.nrows())).collect(),
            soc: shape.soc.as_ref().map(|v| SocScaling::identity(v.len())),
        }
    }

    fn lambda(&self) -> ConeVec {
        ConeVec {
            psd: self
                .psd
                .iter()
                .map(|p| DMatrix::from_diagonal(&p.lambda))
                .collect(),
            soc: self.soc.as_ref().map(|q| q.lambda.clone()),
        }
    }

    fn w(&self, z: &ConeVec) -> ConeVec {
        ConeVec {
            psd: self.psd.iter().zip(&z.psd).map(|(p, z)| p.w(z)).collect(),
            soc: zip_soc(&self.soc, &z.soc, |q, z| q.w(z)),
        }
    }
    fn wt(&self, u: &ConeVec) -> ConeVec {
        ConeVec {
            psd: self.psd.iter().zip(&u.psd).map(|(p, u)| p.wt(u)).collect(),
            soc: zip_soc(&self.soc, &u.soc, |q, u| q.w(u)),
        }
    }
    fn winv(&self, u: &ConeVec) -> ConeVec {
        ConeVec {
            psd: self.psd.iter().zip(&u.psd).map(|(p, u)| p.winv(u)).collect(),
            soc: zip_soc(&self.soc, &u.soc, |q, u| q.winv(u)),
        }
    }
    fn winvt(&self, s: &ConeVec) -> ConeVec {
        ConeVec {
            psd: self.psd.iter().zip(&s.psd).map(|(p, s)| p.winvt(s)).collect(),
            soc: zip_soc(&self.soc, &s.soc, |q, s| q.winv(s)),
        }
    }
    /// `(W^T W)^{-1} r`.
    fn wtw_inv(&self, r: &ConeVec) -> ConeVec {
        self.winv(&self.winvt(r))
    }
    fn wtw(&self, z: &ConeVec) -> ConeVec {
        self.wt(&self.w(z))
    }
}

fn zip_soc<F>(scale: &Option<SocScaling>, x: &Option<DVector<f64>>, f: F) -> Option<DVector<f64>>
where
    F: Fn(&SocScaling, &DVector<f64>) -> DVector<f64>,
{
    match (scale, x) {
        (Some(q), Some(x)) => Some(f(q, x)),
        _ => None,
    }
}

/// Solves `lambda o x = d` for `x`.
fn lambda_solve(lambda: &Scaling, d: &ConeVec) -> ConeVec {
    ConeVec {
        psd: lambda
            .psd
            .iter()
            .zip(&d.psd)
            .map(|(p, d)| {
                let l = &p.lambda;
                DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| 2.0 * d[(i, j)] / (l[i] + l[j]))
            })
            .collect(),
        soc: zip_soc(&lambda.soc, &d.soc, |q, d| {
            let u = &q.lambda;
            let n = u.len();
            let u1 = u.rows(1, n - 1);
            let d1 = d.rows(1, n - 1);
            let det = jnorm_sq(u);
            let x0 = (u[0] * d[0] - u1.dot(&d1)) / det;
            let mut x = DVector::zeros(n);
            x[0] = x0;
            for i in 1..n {
                x[i] = (d[i] - x0 * u[i]) / u[0];
            }
            x
        }),
    }
}

/// Largest `alpha` with `lambda + alpha * d` in the cone.
fn max_step(lambda: &Scaling, d: &ConeVec) -> f64 {
    let mut alpha = f64::INFINITY;
    for (p, dm) in lambda.psd.iter().zip(&d.psd) {
        let isq = p.lambda.map(|l| 1.0 / l.sqrt());
        let scaled = DMatrix::from_fn(dm.nrows(), dm.ncols(), |i, j| isq[i] * dm[(i, j)] * isq[j]);
        let min = SymmetricEigen::new(scaled)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            alpha = alpha.min(-1.0 / min);
        }
    }
    if let (Some(q), Some(dv)) = (&lambda.soc, &d.soc) {
        alpha = alpha.min(soc_step(&q.lambda, dv));
    }
    alpha
}

fn soc_step(u: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let jd = jmul(d);
    let a = d.dot(&jd);
    let b = u.dot(&jd);
    let c = jnorm_sq(u);
    if a == 0.0 {
        return if b < 0.0 { -c / (2.0 * b) } else { f64::INFINITY };
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let root = disc.sqrt();
    let qq = -(b + b.signum() * root);
    let mut best = f64::INFINITY;
    for r in [qq / a, if qq != 0.0 { c / qq } else { f64::INFINITY }] {
        if r > 0.0 {
            best = best.min(r);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Standard form
// ---------------------------------------------------------------------------

struct Block {
    size: usize,
    /// Constant part `B_0` (the `y_0` coefficient).
    h: DMatrix<f64>,
    /// `(x index, B_p)`; the block is `h + sum x_i B_i`, so `G` column is `-B_i`.
    cols: Vec<(usize, DMatrix<f64>)>,
}

struct StandardForm {
    m: usize,
    nx: usize,
    c: DVector<f64>,
    c0: f64,
    blocks: Vec<Block>,
    /// Second-order cone of dimension `m + 1` over `(t, y)`.
    soc: bool,
    degree: f64,
}

impl StandardForm {
    fn new(prog: &ConicProgram) -> Self {
        let m = prog.m();
        let soc = prog.epsilon > 0.0;
        let nx = m - 1 + usize::from(soc);
        let mut c = DVector::zeros(nx);
        for i in 1..m {
            c[i - 1] = prog.c[i];
        }
        if soc {
            c[m - 1] = prog.epsilon;
        }
        let blocks: Vec<Block> = prog
            .psd_blocks
            .iter()
            .map(|map| {
                let size = map.size();
                let mut h = DMatrix::zeros(size, size);
                let mut cols = Vec::new();
                for (p, b) in map.coefficient_matrices() {
                    if p == 0 {
                        h = b;
                    } else {
                        cols.push((p - 1, b));
                    }
                }
                Block { size, h, cols }
            })
            .collect();
        let degree = blocks.iter().map(|b| b.size as f64).sum::<f64>() + if soc { 1.0 } else { 0.0 };
        StandardForm {
            m,
            nx,
            c,
            c0: prog.c[0],
            blocks,
            soc,
            degree,
        }
    }

    fn t_index(&self) -> usize {
        self.m - 1
    }

    fn zeros(&self) -> ConeVec {
        ConeVec {
            psd: self.blocks.iter().map(|b| DMatrix::zeros(b.size, b.size)).collect(),
            soc: self.soc.then(|| DVector::zeros(self.m + 1)),
        }
    }

    fn h(&self) -> ConeVec {
        ConeVec {
            psd: self.blocks.iter().map(|b| b.h.clone()).collect(),
            soc: self.soc.then(|| {
                let mut v = DVector::zeros(self.m + 1);
                v[1] = 1.0;
                v
            }),
        }
    }

    /// Row of the SOC vector `(t, y_0, y_1, ...)` holding variable `i`.
    fn soc_row(&self, i: usize) -> usize {
        if i == self.t_index() {
            0
        } else {
            i + 2
        }
    }

    fn g_mul(&self, x: &DVector<f64>) -> ConeVec {
        let mut out = self.zeros();
        for (blk, o) in self.blocks.iter().zip(out.psd.iter_mut()) {
            for (i, b) in &blk.cols {
                *o -= b * x[*i];
            }
        }
        if let Some(v) = &mut out.soc {
            for i in 0..self.nx {
                v[self.soc_row(i)] = -x[i];
            }
        }
        out
    }

    fn gt_mul(&self, z: &ConeVec) -> DVector<f64> {
        let mut out = DVector::zeros(self.nx);
        for (blk, zm) in self.blocks.iter().zip(&z.psd) {
            for (i, b) in &blk.cols {
                out[*i] -= b.dot(zm);
            }
        }
        if let Some(v) = &z.soc {
            for i in 0..self.nx {
                out[i] -= v[self.soc_row(i)];
            }
        }
        out
    }

    /// `G^T (W^T W)^{-1} G`.
    fn normal_matrix(&self, scaling: &Scaling) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.nx, self.nx);
        for (blk, sc) in self.blocks.iter().zip(&scaling.psd) {
            let pinv = sc.pinv();
            let scaled: Vec<DMatrix<f64>> = blk.cols.iter().map(|(_, b)| &pinv * b * &pinv).collect();
            for (a, (ia, _)) in blk.cols.iter().enumerate() {
                for (ib, bb) in blk.cols.iter().take(a + 1) {
                    let v = scaled[a].dot(bb);
                    h[(*ia, *ib)] += v;
                    if ia != ib {
                        h[(*ib, *ia)] += v;
                    }
                }
            }
        }
        if let Some(sc) = &scaling.soc {
            let winv = sc.winv_dense();
            let w2 = &winv * &winv;
            for i in 0..self.nx {
                let ri = self.soc_row(i);
                for j in 0..self.nx {
                    h[(i, j)] += w2[(ri, self.soc_row(j))];
                }
            }
        }
        h
    }
}

struct Kkt<'a> {
    form: &'a StandardForm,
    scaling: &'a Scaling,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> Kkt<'a> {
    fn factor(form: &'a StandardForm, scaling: &'a Scaling) -> Option<Self> {
        let h = form.normal_matrix(scaling);
        let diag_max = h.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut hh = h.clone();
            for i in 0..hh.nrows() {
                hh[(i, i)] += reg;
            }
            if let Some(chol) = Cholesky::new(hh) {
                return Some(Kkt { form, scaling, chol });
            }
            reg = if reg == 0.0 { 1e-13 * diag_max } else { reg * 100.0 };
        }
        None
    }

    fn solve_once(&self, r1: &DVector<f64>, r2: &ConeVec) -> (DVector<f64>, ConeVec) {
        let t = self.scaling.wtw_inv(r2);
        let rhs = r1 + self.form.gt_mul(&t);
        let dx = self.chol.solve(&rhs);
        let mut gdx = self.form.g_mul(&dx);
        gdx.axpy(-1.0, r2);
        let dz = self.scaling.wtw_inv(&gdx);
        (dx, dz)
    }

    /// Solves `[0 G^T; G -W^T W] [dx; dz] = [r1; r2]` with two rounds of
    /// iterative refinement.
    fn solve(&self, r1: &DVector<f64>, r2: &ConeVec) -> (DVector<f64>, ConeVec) {
        let (mut dx, mut dz) = self.solve_once(r1, r2);
        for _ in 0..2 {
            let e1 = r1 - self.form.gt_mul(&dz);
            let mut e2 = r2.clone();
            e2.axpy(-1.0, &self.form.g_mul(&dx));
            e2.axpy(1.0, &self.scaling.wtw(&dz));
            let (cx, cz) = self.solve_once(&e1, &e2);
            dx += cx;
            dz.axpy(1.0, &cz);
        }
        (dx, dz)
    }
}

struct Direction {
    dx: DVector<f64>,
    ds: ConeVec,
    dz: ConeVec,
    // the same two directions in scaled coordinates
    ds_scaled: ConeVec,
    dz_scaled: ConeVec,
    dtau: f64,
    dkappa: f64,
}

/// Solves a program with the homogeneous self-dual interior-point method.
pub fn solve(prog: &ConicProgram, settings: &SolverSettings) -> ConicSolution {
    let form = StandardForm::new(prog);
    let h = form.h();
    let c = &form.c;
    let hnorm = h.norm().max(1.0);
    let cnorm = c.norm().max(1.0);

    // Least-squares starting point shifted into the cone interior.
    let ident = Scaling::identity(&h);
    let Some(kkt0) = Kkt::factor(&form, &ident) else {
        return failure(prog, &form, SolveStatus::NumericalFailure, 0);
    };
    // x minimizes ||h - Gx||; z is the least-norm solution of G^T z = -c.
    let (mut x, _) = kkt0.solve(&DVector::zeros(form.nx), &h);
    let mut s = h.clone();
    s.axpy(-1.0, &form.g_mul(&x));
    let (_, mut z) = kkt0.solve(&(-c), &h.zeros_like());
    let e = h.identity_like();
    for v in [&mut s, &mut z] {
        let viol = v.max_violation();
        if viol >= -1e-8 * v.norm().max(1.0) {
            v.axpy(1.0 + viol, &e);
        }
    }
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    loop {
        let rx = form.gt_mul(&z) + c * tau;
        let mut rz = s.clone();
        rz.axpy(1.0, &form.g_mul(&x));
        rz.axpy(-tau, &h);
        let cx = c.dot(&x);
        let hz = h.dot(&z);
        let rt = kappa + cx + hz;
        let sz = s.dot(&z);
        let mu = (sz + tau * kappa) / (form.degree + 1.0);

        let pcost = cx / tau + form.c0;
        let dcost = -hz / tau + form.c0;
        let pres = rz.norm() / tau / hnorm;
        let dres = rx.norm() / tau / cnorm;
        let scale = 1.0 + pcost.abs();
        let relgap = (pcost - dcost).abs() / scale;
        let compgap = sz / (tau * tau) / scale;

        if std::env::var_os("POLYPORT_TRACE").is_some() {
            eprintln!(
                "{iterations:3} pcost {pcost:+.9e} dcost {dcost:+.9e} pres {pres:.2e} dres {dres:.2e} gap {compgap:.2e} tau {tau:.2e} kappa {kappa:.2e}"
            );
        }
        if pres <= settings.feas_tol
            && dres <= settings.feas_tol
            && relgap <= settings.gap_tol
            && compgap <= settings.gap_tol
        {
            status = SolveStatus::Optimal;
            break;
        }
        if hz < 0.0 {
            let gtz = form.gt_mul(&z);
            if gtz.norm() / (-hz) / cnorm <= settings.feas_tol {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        if cx < 0.0 {
            let mut gxs = form.g_mul(&x);
            gxs.axpy(1.0, &s);
            if gxs.norm() / (-cx) / hnorm <= settings.feas_tol {
                status = SolveStatus::PrimalUnbounded;
                break;
            }
        }
        if iterations >= settings.max_iter {
            break;
        }
        iterations += 1;

        let Some(scaling) = Scaling::new(&s, &z) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let lambda = scaling.lambda();
        let Some(kkt) = Kkt::factor(&form, &scaling) else {
            status = SolveStatus::NumericalFailure;
            break;
        };

        // Direction along tau: G^T dz1 = -c, G dx1 - W^T W dz1 = h.
        let (dx1, dz1) = kkt.solve(&(-c), &h);
        let wdz1 = scaling.w(&dz1);
        let denom = -kappa / tau - wdz1.dot(&wdz1);

        let direction = |sigma: f64, corr: Option<&Direction>| -> Direction {
            let keep = 1.0 - sigma;
            let dxr = &rx * (-keep);
            let dzr = rz.scaled(-keep);
            let dtr = -keep * rt;
            let mut dsr = lambda.jordan(&lambda).scaled(-1.0);
            dsr.axpy(sigma * mu, &e);
            let mut dkr = -tau * kappa + sigma * mu;
            if let Some(a) = corr {
                dsr.axpy(-1.0, &a.ds_scaled.jordan(&a.dz_scaled));
                dkr -= a.dtau * a.dkappa;
            }
            let ds_tilde = lambda_solve(&scaling, &dsr);
            let mut r2 = dzr.clone();
            r2.axpy(-1.0, &scaling.wt(&ds_tilde));
            let (dx0, dz0) = kkt.solve(&dxr, &r2);
            let dtau = (dtr - dkr / tau - c.dot(&dx0) - h.dot(&dz0)) / denom;
            let dx = dx0 + &dx1 * dtau;
            let mut dz = dz0;
            dz.axpy(dtau, &dz1);
            let dkappa = (dkr - kappa * dtau) / tau;
            // ds from the linear equation keeps rz exactly on its path
            let mut ds = dzr;
            ds.axpy(-1.0, &form.g_mul(&dx));
            ds.axpy(dtau, &h);
            Direction {
                ds_scaled: scaling.winvt(&ds),
                dz_scaled: scaling.w(&dz),
                dx,
                ds,
                dz,
                dtau,
                dkappa,
            }
        };
        let step_of = |d: &Direction| -> f64 {
            let mut a = max_step(&scaling, &d.ds_scaled).min(max_step(&scaling, &d.dz_scaled));
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a
        };

        let affine = direction(0.0, None);
        let alpha_aff = step_of(&affine).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);
        let comb = direction(sigma, Some(&affine));
        let alpha = (STEP_FRACTION * step_of(&comb)).min(1.0);
        if !(alpha.is_finite() && alpha > 1e-14) {
            status = SolveStatus::NumericalFailure;
            break;
        }

        x.axpy(alpha, &comb.dx, 1.0);
        tau += alpha * comb.dtau;
        kappa += alpha * comb.dkappa;
        s.axpy(alpha, &comb.ds);
        z.axpy(alpha, &comb.dz);
        symmetrize(&mut s);
        symmetrize(&mut z);
        if !(tau.is_finite() && kappa.is_finite() && x.iter().all(|v| v.is_finite())) {
            status = SolveStatus::NumericalFailure;
            break;
        }
    }

    let cx = c.dot(&x);
    let hz = h.dot(&z);
    let (x_out, z_out, ray) = match status {
        SolveStatus::PrimalUnbounded => {
            let ray_x = &x / (-cx);
            let mut ray = vec![0.0; form.m];
            ray[1..form.m].copy_from_slice(&ray_x.as_slice()[..form.m - 1]);
            (x / tau, z.scaled(1.0 / tau), Some(ray))
        }
        SolveStatus::Infeasible => (x / tau, z.scaled(1.0 / (-hz)), None),
        _ => (x / tau, z.scaled(1.0 / tau), None),
    };
    let mut rz = s.scaled(1.0 / tau);
    rz.axpy(1.0, &form.g_mul(&x_out));
    rz.axpy(-1.0, &h);
    let rx = form.gt_mul(&z_out) + c;
    assemble(prog, &form, status, iterations, &x_out, &z_out, ray, rz.norm() / hnorm, rx.norm() / cnorm)
}

fn symmetrize(v: &mut ConeVec) {
    for m in &mut v.psd {
        let t = m.transpose();
        *m += t;
        *m *= 0.5;
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    prog: &ConicProgram,
    form: &StandardForm,
    status: SolveStatus,
    iterations: usize,
    x: &DVector<f64>,
    z: &ConeVec,
    ray: Option<Vec<f64>>,
    primal_residual: f64,
    dual_residual: f64,
) -> ConicSolution {
    let m = form.m;
    let mut yv = vec![1.0; m];
    yv[1..m].copy_from_slice(&x.as_slice()[..m - 1]);
    let y = Tms::new(prog.nvars, prog.degree, yv).expect("length m");
    let t = if form.soc { x[form.t_index()] } else { y.norm() };
    let objective = form.c.dot(x) + form.c0;
    let dual_objective = -form.h().dot(z) + form.c0;
    let soc_dual = z.soc.as_ref().map(|v| SocDual {
        eta: v[0],
        q: v.rows(1, m).iter().copied().collect(),
    });
    ConicSolution {
        status,
        y,
        t,
        objective,
        dual_objective,
        gram: z.psd.clone(),
        soc_dual,
        gamma: dual_objective,
        gap: (objective - dual_objective).abs() / (1.0 + objective.abs()),
        primal_residual,
        dual_residual,
        iterations,
        ray,
    }
}

fn failure(prog: &ConicProgram, form: &StandardForm, status: SolveStatus, iterations: usize) -> ConicSolution {
    let x = DVector::zeros(form.nx);
    let z = form.zeros();
    assemble(prog, form, status, iterations, &x, &z, None, f64::NAN, f64::NAN)
}

/// An SOS certificate `f - q - gamma = sum_j g_j * ([x]^T G_j [x])`.
#[derive(Debug, Clone)]
pub struct SosCertificate {
    pub gamma: f64,
    pub q: Polynomial,
    pub gram: Vec<DMatrix<f64>>,
    /// `f - q - gamma - sum_j g_j sigma_j`, which vanishes for an exact
    /// certificate.
    pub residual: Polynomial,
}

impl SosCertificate {
    pub fn residual_norm(&self) -> f64 {
        self.residual.coefficient_norm()
    }
}

/// Reads the SOS certificate off the dual multipliers of an optimal solve.
///
/// The perturbation `q` is the SOC multiplier, pulled back onto the ball
/// `||vec(q)|| <= eps` when round-off leaves it marginally outside; anything
/// removed that way shows up in the residual.
pub fn recover_sos_certificate(prog: &ConicProgram, sol: &ConicSolution) -> Result<SosCertificate> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::NotOptimal(sol.status));
    }
    let basis = MonomialBasis::new(prog.nvars, prog.degree);
    let m = prog.m();
    let mut coeffs = prog.c.clone();
    coeffs[0] -= sol.gamma;

    let mut qv = vec![0.0; m];
    if let Some(d) = &sol.soc_dual {
        let norm = d.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shrink = if norm > prog.epsilon && norm > 0.0 {
            prog.epsilon / norm
        } else {
            1.0
        };
        for (qi, di) in qv.iter_mut().zip(&d.q) {
            *qi = di * shrink;
        }
    }
    for (ci, qi) in coeffs.iter_mut().zip(&qv) {
        *ci -= qi;
    }
    for (map, g) in prog.psd_blocks.iter().zip(&sol.gram) {
        for (p, b) in map.coefficient_matrices() {
            coeffs[p] -= b.dot(g);
        }
    }
    Ok(SosCertificate {
        gamma: sol.gamma,
        q: Polynomial::from_coefficients(&basis, &qv)?,
        gram: sol.gram.clone(),
        residual: Polynomial::from_coefficients(&basis, &coeffs)?,
    })
}
