//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀ H x + fᵀ x
//! subject to  A x ≤ b,   lb ≤ x ≤ ub
//! ```
//!
//! with an operator-splitting (ADMM) iteration on a Ruiz-equilibrated copy of the
//! problem. Bounds are kept as a separate diagonal block so that one dense
//! Cholesky factorization of `H + σI + Aᵀ diag(ρ) A + diag(ρ_box)` serves every
//! iteration. Once the iterates settle, the active set is guessed from the duals
//! and the reduced KKT system is solved directly ("polishing"); a polished point
//! is only accepted if it passes the full KKT check at the requested tolerance.

use std::fmt::Write as _;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Diagonal regularization added to `H` inside the iteration.
const H_REGULARIZATION: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("cost matrix is not positive semidefinite")]
    NotPsd,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("dump parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_ineq: DMatrix<f64>,
        b_ineq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = Self {
            h,
            f,
            a_ineq,
            b_ineq,
            lb,
            ub,
        };
        p.validate()?;
        Ok(p)
    }

    /// Problem with only box constraints.
    pub fn boxed(
        h: DMatrix<f64>,
        f: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0), lb, ub)
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn m(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.f.len();
        let m = self.b_ineq.len();
        let bad = |msg: String| Err(QpError::InvalidProblem(msg));
        if self.h.nrows() != n || self.h.ncols() != n {
            return bad(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            ));
        }
        if self.a_ineq.nrows() != m || self.a_ineq.ncols() != n {
            return bad(format!(
                "A is {}x{}, expected {m}x{n}",
                self.a_ineq.nrows(),
                self.a_ineq.ncols()
            ));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return bad("bound vectors must have length n".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(self.h.as_slice())
            || !finite(self.f.as_slice())
            || !finite(self.a_ineq.as_slice())
        {
            return bad("H, f and A must be finite".into());
        }
        if self
            .b_ineq
            .iter()
            .any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return bad("b must not be NaN or -inf".into());
        }
        let hmax = self.h.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-10 * hmax {
                    return bad(format!("H not symmetric at ({i}, {j})"));
                }
            }
            let (l, u) = (self.lb[i], self.ub[i]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return bad(format!("invalid bounds [{l}, {u}] for x[{i}]"));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Writes the plain-text dump format read by [`parse_qp_dump`].
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "qp {} {}", self.n(), self.m());
        let mut section = |name: &str, rows: Vec<Vec<f64>>| {
            let _ = writeln!(s, "{name}");
            for r in rows {
                let line: Vec<String> = r.iter().map(|v| format_num(*v)).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        };
        let mat_rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        section("H", mat_rows(&self.h));
        section("f", vec![self.f.iter().copied().collect()]);
        section("A", mat_rows(&self.a_ineq));
        section("b", vec![self.b_ineq.iter().copied().collect()]);
        section("lb", vec![self.lb.iter().copied().collect()]);
        section("ub", vec![self.ub.iter().copied().collect()]);
        s
    }
}

fn format_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Parses the dump format: a `qp <n> <m>` header followed by the sections
/// `H`, `f`, `A`, `b`, `lb`, `ub`, each a section name line and then row-major
/// whitespace-separated decimals (`inf`/`-inf` allowed). Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_qp_dump<R: Read>(mut reader: R) -> Result<QpProblem, QpError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| QpError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let err = |line: usize, msg: &str| QpError::Parse {
        line,
        msg: msg.to_string(),
    };
    let (line, header) = lines.next().ok_or_else(|| err(0, "empty dump"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("qp") {
        return Err(err(line, "expected `qp <n> <m>` header"));
    }
    let mut dim = || -> Result<usize, QpError> {
        let v: usize = parts
            .next()
            .ok_or_else(|| err(line, "missing dimension"))?
            .parse()
            .map_err(|_| err(line, "bad dimension"))?;
        if v > 10_000 {
            return Err(err(line, "dimension too large"));
        }
        Ok(v)
    };
    let (n, m) = (dim()?, dim()?);

    let mut read_section = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, QpError> {
        let (line, tag) = lines
            .next()
            .ok_or_else(|| err(0, &format!("missing section {name}")))?;
        if tag != name {
            return Err(err(line, &format!("expected section `{name}`")));
        }
        let mut out = Vec::with_capacity(rows * cols);
        let row_count = if cols == 0 { 0 } else { rows };
        for _ in 0..row_count {
            let (line, row) = lines
                .next()
                .ok_or_else(|| err(0, &format!("section {name} truncated")))?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| match t {
                    "inf" | "+inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    _ => t.parse::<f64>().map_err(|_| err(line, "bad number")),
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != cols {
                return Err(err(
                    line,
                    &format!("section {name}: expected {cols} values"),
                ));
            }
            out.extend(vals);
        }
        Ok(out)
    };
    let h = read_section("H", n, n)?;
    let f = read_section("f", 1, n)?;
    let a = read_section("A", m, n)?;
    let b = read_section("b", 1, m)?;
    let lb = read_section("lb", 1, n)?;
    let ub = read_section("ub", 1, n)?;
    QpProblem::new(
        DMatrix::from_row_slice(n, n, &h),
        DVector::from_vec(f),
        DMatrix::from_row_slice(m, n, &a),
        DVector::from_vec(b),
        DVector::from_vec(lb),
        DVector::from_vec(ub),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Lagrange multipliers. `ineq` belongs to `A x ≤ b` (non-negative at optimum).
/// `bounds[j]` is positive when the upper bound is active and negative for the lower.
#[derive(Debug, Clone, PartialEq)]
pub struct QpDuals {
    pub ineq: DVector<f64>,
    pub bounds: DVector<f64>,
}

impl QpDuals {
    pub fn zeros(p: &QpProblem) -> Self {
        Self {
            ineq: DVector::zeros(p.m()),
            bounds: DVector::zeros(p.n()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub duals: QpDuals,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub check_every: usize,
    pub infeasibility_tol: f64,
    pub polish: bool,
    /// Rebalance `ρ` from the residual ratio every `adaptive_rho_interval` iterations
    /// (0 disables).
    pub adaptive_rho_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_every: 5,
            infeasibility_tol: 1e-4,
            polish: true,
            adaptive_rho_interval: 25,
        }
    }
}

/// Initial point for the iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub duals: Option<QpDuals>,
}

/// ∞-norms of the KKT residual blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_feas: f64,
    pub comp_slack: f64,
    /// Wrong-signed multipliers, including multipliers on infinite bounds.
    pub dual_feas: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feas)
            .max(self.comp_slack)
            .max(self.dual_feas)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// KKT residuals of `(x, duals)` for the unscaled problem (without regularization).
pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, duals: &QpDuals) -> KktResiduals {
    let ax = &p.a_ineq * x;
    let grad = &p.h * x + &p.f + p.a_ineq.tr_mul(&duals.ineq) + &duals.bounds;
    let stationarity = grad.amax();

    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for i in 0..p.m() {
        let slack = p.b_ineq[i] - ax[i];
        let lam = duals.ineq[i];
        primal = primal.max(-slack);
        dual = dual.max(-lam);
        if lam != 0.0 {
            comp = comp.max((lam * slack).abs());
        }
    }
    for j in 0..p.n() {
        primal = primal.max(p.lb[j] - x[j]).max(x[j] - p.ub[j]);
        let mu = duals.bounds[j];
        if mu > 0.0 {
            if p.ub[j].is_finite() {
                comp = comp.max(mu * (p.ub[j] - x[j]).abs());
            } else {
                dual = dual.max(mu);
            }
        } else if mu < 0.0 {
            if p.lb[j].is_finite() {
                comp = comp.max(-mu * (x[j] - p.lb[j]).abs());
            } else {
                dual = dual.max(-mu);
            }
        }
    }
    KktResiduals {
        stationarity,
        primal_feas: primal.max(0.0),
        comp_slack: comp,
        dual_feas: dual,
    }
}

pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(p, settings, None)
}

/// Ruiz equilibration of `H` and `A` plus cost scaling.
struct Equilibration {
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    /// Variable scaling: `x = d ∘ x̄`.
    d: DVector<f64>,
    /// Row scaling of `A`.
    e: DVector<f64>,
    /// Cost scaling.
    c: f64,
}

/// Vector data of one solve in scaled units.
struct ScaledVecs {
    q: DVector<f64>,
    b: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
}

fn inf_norm_scale(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        (1.0 / v.sqrt()).clamp(1e-4, 1e4)
    }
}

impl Equilibration {
    fn new(prob: &QpProblem, iters: usize) -> Self {
        let n = prob.n();
        let m = prob.m();
        let mut p = prob.h.clone();
        for i in 0..n {
            p[(i, i)] += H_REGULARIZATION;
        }
        let mut a = prob.a_ineq.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        for _ in 0..iters {
            let dd: DVector<f64> = DVector::from_fn(n, |j, _| {
                let pc = p.column(j).amax();
                let ac = if m > 0 { a.column(j).amax() } else { 0.0 };
                inf_norm_scale(pc.max(ac))
            });
            let ee: DVector<f64> = DVector::from_fn(m, |i, _| inf_norm_scale(a.row(i).amax()));
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    a[(i, j)] *= ee[i] * dd[j];
                }
                d[j] *= dd[j];
            }
            for i in 0..m {
                e[i] *= ee[i];
            }
        }
        let mean_col = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let q_norm = prob.f.component_mul(&d).amax();
        let c = (1.0 / mean_col.max(q_norm).max(1e-4)).clamp(1e-4, 1e4);
        p *= c;
        Self { p, a, d, e, c }
    }

    fn vectors(&self, prob: &QpProblem) -> ScaledVecs {
        ScaledVecs {
            q: prob.f.component_mul(&self.d) * self.c,
            b: prob.b_ineq.component_mul(&self.e),
            lb: prob.lb.component_div(&self.d),
            ub: prob.ub.component_div(&self.d),
        }
    }
}

struct Iterate {
    x: DVector<f64>,
    za: DVector<f64>,
    ya: DVector<f64>,
    zb: DVector<f64>,
    yb: DVector<f64>,
}

impl Iterate {
    fn unscaled_duals(&self, s: &Equilibration) -> QpDuals {
        QpDuals {
            ineq: self.ya.component_mul(&s.e) / s.c,
            bounds: self.yb.component_div(&s.d) / s.c,
        }
    }
}

fn psd_check(h: &DMatrix<f64>) -> Result<(), QpError> {
    let n = h.nrows();
    let diagonal = (0..n).all(|j| (0..n).all(|i| i == j || h[(i, j)] == 0.0));
    if diagonal {
        if (0..n).all(|i| h[(i, i)] >= -H_REGULARIZATION) {
            return Ok(());
        }
        return Err(QpError::NotPsd);
    }
    let mut reg = h.clone();
    let scale = h.amax().max(1.0);
    for i in 0..n {
        reg[(i, i)] += H_REGULARIZATION * scale;
    }
    reg.cholesky().map(|_| ()).ok_or(QpError::NotPsd)
}

/// Solves `p` starting from an optional warm start.
pub fn solve_qp_warm(
    p: &QpProblem,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, QpError> {
    QpWorkspace::new(p, settings)?.solve(p, warm)
}

type Chol = nalgebra::Cholesky<f64, nalgebra::Dyn>;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Refactor only when the suggested `ρ` moves by more than this factor.
const RHO_REFACTOR_RATIO: f64 = 5.0;

fn factor(p_sigma: &DMatrix<f64>, a_rho: &DMatrix<f64>, scale: f64) -> Result<Chol, QpError> {
    let kkt = p_sigma + a_rho * scale;
    kkt.cholesky().ok_or(QpError::NotPsd)
}

/// Scaling and KKT factorization for a fixed `H` and `A`.
///
/// Problems that differ from the one the workspace was built from only in
/// `f`, `b`, `lb` and `ub` can be solved without refactoring. Variables whose
/// bounds coincide at construction get a stiffer penalty; bounds that are
/// fixed later still converge, only more slowly.
///
/// The step size `ρ` adapted during one solve is kept for the next one, so a
/// sequence of related problems settles on a good factorization.
/// Bounds with `lb == ub` get a stiffer penalty.
fn bound_penalties(p: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_fn(
        p.n(),
        |j, _| if p.lb[j] == p.ub[j] { 1e3 * rho } else { rho },
    )
}

pub struct QpWorkspace {
    settings: QpSettings,
    eq: Equilibration,
    /// Base penalties; the effective ones are these times `rho_scale`.
    rho_a: DVector<f64>,
    rho_b: DVector<f64>,
    /// `P̄ + σI`.
    p_sigma: DMatrix<f64>,
    /// `Āᵀ diag(ρ_a) Ā + diag(ρ_b)` for the base penalties.
    a_rho: DMatrix<f64>,
    rho_scale: f64,
    chol: Chol,
}

impl QpWorkspace {
    pub fn new(p: &QpProblem, settings: &QpSettings) -> Result<Self, QpError> {
        p.validate()?;
        psd_check(&p.h)?;
        let n = p.n();
        let m = p.m();
        let eq = Equilibration::new(p, settings.scaling_iters);
        let rho = settings.rho;
        let rho_a = DVector::from_element(m, rho);
        let rho_b = bound_penalties(p, rho);
        let mut p_sigma = eq.p.clone();
        for j in 0..n {
            p_sigma[(j, j)] += settings.sigma;
        }
        let mut a_rho = if m > 0 {
            let weighted = DMatrix::from_fn(m, n, |i, j| eq.a[(i, j)] * rho_a[i]);
            eq.a.tr_mul(&weighted)
        } else {
            DMatrix::zeros(n, n)
        };
        for j in 0..n {
            a_rho[(j, j)] += rho_b[j];
        }
        let chol = factor(&p_sigma, &a_rho, 1.0)?;
        Ok(Self {
            settings: *settings,
            eq,
            rho_a,
            rho_b,
            p_sigma,
            a_rho,
            rho_scale: 1.0,
            chol,
        })
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    /// Residual-balancing step size in scaled units.
    fn suggest_rho_scale(
        &self,
        v: &ScaledVecs,
        it: &Iterate,
        ax: &DVector<f64>,
        px: &DVector<f64>,
        aty: &DVector<f64>,
        scale: f64,
    ) -> f64 {
        let mut prim: f64 = 0.0;
        let mut prim_norm: f64 = 1e-12;
        for i in 0..ax.len() {
            prim = prim.max((ax[i] - it.za[i]).abs());
            prim_norm = prim_norm.max(ax[i].abs()).max(it.za[i].abs());
        }
        for j in 0..it.x.len() {
            prim = prim.max((it.x[j] - it.zb[j]).abs());
            prim_norm = prim_norm.max(it.x[j].abs()).max(it.zb[j].abs());
        }
        let mut dual: f64 = 0.0;
        let mut dual_norm: f64 = 1e-12;
        for j in 0..it.x.len() {
            dual = dual.max((px[j] + v.q[j] + aty[j] + it.yb[j]).abs());
            dual_norm = dual_norm
                .max(px[j].abs())
                .max((aty[j] + it.yb[j]).abs())
                .max(v.q[j].abs());
        }
        let ratio = (prim / prim_norm) / (dual / dual_norm).max(1e-12);
        let base = self.settings.rho;
        ((scale * base * ratio.sqrt()).clamp(RHO_MIN, RHO_MAX)) / base
    }

    /// Solves `p`, whose `H` and `A` must equal those given to [`QpWorkspace::new`].
    pub fn solve(
        &mut self,
        p: &QpProblem,
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution, QpError> {
        if p.n() == self.rho_b.len() {
            let rho_b = bound_penalties(p, self.settings.rho);
            if rho_b != self.rho_b {
                for j in 0..rho_b.len() {
                    self.a_rho[(j, j)] += rho_b[j] - self.rho_b[j];
                }
                self.rho_b = rho_b;
                self.chol = factor(&self.p_sigma, &self.a_rho, self.rho_scale)?;
            }
        }
        let (sol, refactored) = self.iterate(p, warm)?;
        if let Some((scale, chol)) = refactored {
            self.rho_scale = scale;
            self.chol = chol;
        }
        Ok(sol)
    }

    #[allow(clippy::type_complexity)]
    fn iterate(
        &self,
        p: &QpProblem,
        warm: Option<&WarmStart>,
    ) -> Result<(QpSolution, Option<(f64, Chol)>), QpError> {
        let n = p.n();
        let m = p.m();
        if n != self.rho_b.len() || m != self.rho_a.len() {
            return Err(QpError::InvalidProblem(
                "problem dimensions differ from the workspace".into(),
            ));
        }
        p.validate()?;
        let settings = &self.settings;
        let s = &self.eq;
        let v = s.vectors(p);
        let mut scale = self.rho_scale;
        let mut rho_a = &self.rho_a * scale;
        let mut rho_b = &self.rho_b * scale;
        let mut local_chol: Option<Chol> = None;
        let sigma = settings.sigma;
        let alpha = settings.alpha;

        let mut it = match warm {
            Some(w) if w.x.len() == n => {
                let x = w.x.component_div(&s.d);
                let ax = &s.a * &x;
                let za = ax.zip_map(&v.b, |a, b| a.min(b));
                let zb = DVector::from_fn(n, |j, _| x[j].clamp(v.lb[j], v.ub[j]));
                let (ya, yb) = match &w.duals {
                    Some(d) if d.ineq.len() == m && d.bounds.len() == n => (
                        d.ineq.component_div(&s.e) * s.c,
                        d.bounds.component_mul(&s.d) * s.c,
                    ),
                    _ => (DVector::zeros(m), DVector::zeros(n)),
                };
                Iterate { x, za, ya, zb, yb }
            }
            _ => {
                let x = DVector::from_fn(n, |j, _| 0.0f64.clamp(v.lb[j], v.ub[j]));
                let za = (&s.a * &x).zip_map(&v.b, |a, b| a.min(b));
                let zb = x.clone();
                Iterate {
                    x,
                    za,
                    ya: DVector::zeros(m),
                    zb,
                    yb: DVector::zeros(n),
                }
            }
        };

        let check_every = settings.check_every.max(1);
        let mut prev_ya = it.ya.clone();
        let mut prev_yb = it.yb.clone();
        let mut last_polish_sig: Option<Vec<i8>> = None;
        let mut last_polish_iter = 0usize;
        let mut infeasible_checks = 0usize;
        let mut polish_gap = POLISH_GAP;
        let mut prev_sig: Option<Vec<i8>> = None;
        let mut stable_checks = 0usize;
        let mut rhs = DVector::zeros(n);
        let mut xt = DVector::zeros(n);
        let mut w = DVector::zeros(m);
        let mut zt = DVector::zeros(m);

        for iter in 1..=settings.max_iter {
            // x-update
            for j in 0..n {
                rhs[j] = sigma * it.x[j] - v.q[j] + rho_b[j] * it.zb[j] - it.yb[j];
            }
            if m > 0 {
                for i in 0..m {
                    w[i] = rho_a[i] * it.za[i] - it.ya[i];
                }
                rhs.gemv_tr(1.0, &s.a, &w, 1.0);
            }
            xt.copy_from(&rhs);
            local_chol.as_ref().unwrap_or(&self.chol).solve_mut(&mut xt);

            // z- and y-updates
            if m > 0 {
                zt.gemv(1.0, &s.a, &xt, 0.0);
                for i in 0..m {
                    let vv = alpha * zt[i] + (1.0 - alpha) * it.za[i];
                    let z_new = (vv + it.ya[i] / rho_a[i]).min(v.b[i]);
                    it.ya[i] += rho_a[i] * (vv - z_new);
                    it.za[i] = z_new;
                }
            }
            for j in 0..n {
                let vv = alpha * xt[j] + (1.0 - alpha) * it.zb[j];
                let z_new = (vv + it.yb[j] / rho_b[j]).clamp(v.lb[j], v.ub[j]);
                it.yb[j] += rho_b[j] * (vv - z_new);
                it.zb[j] = z_new;
                it.x[j] = alpha * xt[j] + (1.0 - alpha) * it.x[j];
            }

            if iter % check_every != 0 {
                continue;
            }

            // residuals in the original units
            let ax_s = &s.a * &it.x;
            let mut prim: f64 = 0.0;
            let mut prim_scale: f64 = 0.0;
            for i in 0..m {
                prim = prim.max(((ax_s[i] - it.za[i]) / s.e[i]).abs());
                prim_scale = prim_scale
                    .max((ax_s[i] / s.e[i]).abs())
                    .max((it.za[i] / s.e[i]).abs());
            }
            for j in 0..n {
                prim = prim.max(((it.x[j] - it.zb[j]) * s.d[j]).abs());
                prim_scale = prim_scale.max((it.x[j] * s.d[j]).abs());
            }
            let px = &s.p * &it.x;
            let aty = if m > 0 {
                s.a.tr_mul(&it.ya)
            } else {
                DVector::zeros(n)
            };
            let mut dual: f64 = 0.0;
            let mut dual_scale: f64 = 0.0;
            for j in 0..n {
                let inv = 1.0 / (s.c * s.d[j]);
                dual = dual.max(((px[j] + v.q[j] + aty[j] + it.yb[j]) * inv).abs());
                dual_scale = dual_scale
                    .max((px[j] * inv).abs())
                    .max((aty[j] * inv).abs())
                    .max((v.q[j] * inv).abs());
            }

            if settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0 {
                let suggested = self.suggest_rho_scale(&v, &it, &ax_s, &px, &aty, scale);
                if suggested > scale * RHO_REFACTOR_RATIO || suggested < scale / RHO_REFACTOR_RATIO
                {
                    scale = suggested;
                    rho_a = &self.rho_a * scale;
                    rho_b = &self.rho_b * scale;
                    local_chol = Some(factor(&self.p_sigma, &self.a_rho, scale)?);
                }
            }

            if infeasible(p, s, &it, &prev_ya, &prev_yb, settings.infeasibility_tol) {
                infeasible_checks += 1;
            } else {
                infeasible_checks = 0;
            }
            if infeasible_checks >= 2 {
                let x = it.x.component_mul(&s.d);
                return Ok((
                    QpSolution {
                        objective: p.objective(&x),
                        x,
                        duals: it.unscaled_duals(s),
                        status: QpStatus::Infeasible,
                        iterations: iter,
                        polished: false,
                    },
                    local_chol.map(|c| (scale, c)),
                ));
            }
            prev_ya.copy_from(&it.ya);
            prev_yb.copy_from(&it.yb);

            let tol = settings.tol;
            let rel_p = prim / (1.0 + prim_scale);
            let rel_d = dual / (1.0 + dual_scale);
            if settings.polish {
                let sig = active_signature(&v, &it);
                if prev_sig.as_ref() == Some(&sig) {
                    stable_checks += 1;
                } else {
                    stable_checks = 0;
                }
                let settled = ((rel_p < 1e-2 && rel_d < 1e-2)
                    || stable_checks >= POLISH_STABLE_CHECKS)
                    && iter >= last_polish_iter + polish_gap;
                if settled && last_polish_sig.as_ref() != Some(&sig) {
                    last_polish_iter = iter;
                    polish_gap *= 2;
                    if let Some((x, duals)) = polish(p, &sig) {
                        if kkt_residuals(p, &x, &duals).within(tol) {
                            return Ok((
                                QpSolution {
                                    objective: p.objective(&x),
                                    x,
                                    duals,
                                    status: QpStatus::Optimal,
                                    iterations: iter,
                                    polished: true,
                                },
                                local_chol.map(|c| (scale, c)),
                            ));
                        }
                    }
                    last_polish_sig = Some(sig.clone());
                }
                prev_sig = Some(sig);
            }
            if prim <= tol && dual <= tol {
                let x = it.x.component_mul(&s.d);
                let duals = it.unscaled_duals(s);
                if kkt_residuals(p, &x, &duals).within(tol) {
                    return Ok((
                        QpSolution {
                            objective: p.objective(&x),
                            x,
                            duals,
                            status: QpStatus::Optimal,
                            iterations: iter,
                            polished: false,
                        },
                        local_chol.map(|c| (scale, c)),
                    ));
                }
            }
        }
        let x = it.x.component_mul(&s.d);
        Ok((
            QpSolution {
                objective: p.objective(&x),
                x,
                duals: it.unscaled_duals(s),
                status: QpStatus::MaxIter,
                iterations: settings.max_iter,
                polished: false,
            },
            local_chol.map(|c| (scale, c)),
        ))
    }
}

/// Primal infeasibility certificate from the change in duals between checks.
fn infeasible(
    p: &QpProblem,
    s: &Equilibration,
    it: &Iterate,
    prev_ya: &DVector<f64>,
    prev_yb: &DVector<f64>,
    eps: f64,
) -> bool {
    let m = p.m();
    let n = p.n();
    let dya: DVector<f64> = (&it.ya - prev_ya).component_mul(&s.e);
    let dyb: DVector<f64> = (&it.yb - prev_yb).component_div(&s.d);
    let norm = dya.amax().max(dyb.amax());
    if norm < 1e-12 {
        return false;
    }
    let thresh = eps * norm;
    let mut support = 0.0;
    for i in 0..m {
        if dya[i] > 0.0 {
            if !p.b_ineq[i].is_finite() {
                if dya[i] > thresh {
                    return false;
                }
                continue;
            }
            support += p.b_ineq[i] * dya[i];
        }
    }
    for j in 0..n {
        let dy = dyb[j];
        if dy > 0.0 {
            if p.ub[j].is_finite() {
                support += p.ub[j] * dy;
            } else if dy > thresh {
                return false;
            }
        } else if dy < 0.0 {
            if p.lb[j].is_finite() {
                support += p.lb[j] * dy;
            } else if -dy > thresh {
                return false;
            }
        }
    }
    let aty = if m > 0 {
        p.a_ineq.tr_mul(&dya)
    } else {
        DVector::zeros(n)
    };
    let res = (aty + dyb).amax();
    // any feasible x has support >= -res * |x|_1; the iterate stands in for it
    let x_norm: f64 = it.x.component_mul(&s.d).iter().map(|v| v.abs()).sum();
    res <= thresh && support < -thresh - res * x_norm
}

/// Per constraint: 1 upper active, -1 lower active, 0 inactive. Rows of `A` first,
/// then bounds.
fn active_signature(s: &ScaledVecs, it: &Iterate) -> Vec<i8> {
    let m = s.b.len();
    let n = s.lb.len();
    let mut sig = Vec::with_capacity(m + n);
    for i in 0..m {
        sig.push(if s.b[i] - it.za[i] < it.ya[i] { 1 } else { 0 });
    }
    for j in 0..n {
        sig.push(if s.lb[j] == s.ub[j] {
            1
        } else if it.zb[j] - s.lb[j] < -it.yb[j] {
            -1
        } else if s.ub[j] - it.zb[j] < it.yb[j] {
            1
        } else {
            0
        });
    }
    sig
}

const POLISH_REFINEMENT_STEPS: usize = 20;
/// Residual checks with an unchanged active-set guess before polishing is tried early.
const POLISH_STABLE_CHECKS: usize = 4;
/// Active-set correction passes per polish attempt.
const POLISH_ROUNDS: usize = 8;
/// Minimum iterations between polish attempts; doubled after every attempt.
const POLISH_GAP: usize = 25;

/// Solves the reduced KKT system for a guessed active set, then corrects the
/// guess and solves again: constraints with wrong-sign multipliers are released
/// (typical when several active constraints are linearly dependent) and
/// violated ones are added.
fn polish(p: &QpProblem, sig: &[i8]) -> Option<(DVector<f64>, QpDuals)> {
    let m = p.m();
    let n = p.n();
    let mut sig = sig.to_vec();
    let mut seen: Vec<Vec<i8>> = Vec::new();
    for _ in 0..POLISH_ROUNDS {
        let (x, duals) = polish_once(p, &sig)?;
        let scale = 1.0 + duals.ineq.amax().max(duals.bounds.amax());
        let tol = 1e-9 * scale;
        let ax = &p.a_ineq * &x;
        let ptol = 1e-9 * (1.0 + x.amax().max(ax.amax()));
        seen.push(sig.clone());
        let mut changed = false;
        for i in 0..m {
            if sig[i] == 1 && duals.ineq[i] < -tol {
                sig[i] = 0;
                changed = true;
            } else if sig[i] == 0 && ax[i] > p.b_ineq[i] + ptol {
                sig[i] = 1;
                changed = true;
            }
        }
        for j in 0..n {
            let fixed = p.lb[j] == p.ub[j];
            let next = match sig[m + j] {
                1 if duals.bounds[j] < -tol && !fixed => 0,
                -1 if duals.bounds[j] > tol && !fixed => 0,
                0 if x[j] > p.ub[j] + ptol => 1,
                0 if x[j] < p.lb[j] - ptol => -1,
                v => v,
            };
            if next != sig[m + j] {
                sig[m + j] = next;
                changed = true;
            }
        }
        if !changed {
            return Some((x, duals));
        }
        if seen.contains(&sig) {
            return None;
        }
    }
    None
}

fn polish_once(p: &QpProblem, sig: &[i8]) -> Option<(DVector<f64>, QpDuals)> {
    let n = p.n();
    let m = p.m();
    let mut x = DVector::zeros(n);
    let mut free = Vec::with_capacity(n);
    for j in 0..n {
        match sig[m + j] {
            1 if p.ub[j].is_finite() => x[j] = p.ub[j],
            -1 if p.lb[j].is_finite() => x[j] = p.lb[j],
            _ => free.push(j),
        }
    }
    let active: Vec<usize> = (0..m)
        .filter(|&i| sig[i] == 1 && p.b_ineq[i].is_finite())
        .collect();
    let nf = free.len();
    let na = active.len();
    let dim = nf + na;

    // K0 = [H_ff, A_afᵀ; A_af, 0]; rhs = [-f_f - H_fB x_B; b_a - A_aB x_B]
    let mut k0 = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let hx_fixed = &p.h * &x;
    let ax_fixed = &p.a_ineq * &x;
    for (r, &j) in free.iter().enumerate() {
        for (c, &jj) in free.iter().enumerate() {
            k0[(r, c)] = p.h[(j, jj)];
        }
        rhs[r] = -p.f[j] - hx_fixed[j];
    }
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            k0[(nf + r, c)] = p.a_ineq[(i, j)];
            k0[(c, nf + r)] = p.a_ineq[(i, j)];
        }
        rhs[nf + r] = p.b_ineq[i] - ax_fixed[i];
    }
    let delta = 1e-12 * (1.0 + k0.amax());
    let mut kd = k0.clone();
    for r in 0..nf {
        kd[(r, r)] += delta;
    }
    for r in nf..dim {
        kd[(r, r)] -= delta;
    }
    let mut sol = DVector::zeros(0);
    if dim > 0 {
        let lu = kd.lu();
        sol = lu.solve(&rhs)?;
        for _ in 0..POLISH_REFINEMENT_STEPS {
            let resid = &rhs - &k0 * &sol;
            if resid.amax() < 1e-14 * (1.0 + rhs.amax()) {
                break;
            }
            let corr = lu.solve(&resid)?;
            sol += corr;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for (r, &j) in free.iter().enumerate() {
        x[j] = sol[r];
    }
    let mut duals = QpDuals::zeros(p);
    for (r, &i) in active.iter().enumerate() {
        duals.ineq[i] = sol[nf + r];
    }
    let grad = &p.h * &x + &p.f + p.a_ineq.tr_mul(&duals.ineq);
    let mut is_free = vec![false; n];
    for &j in &free {
        is_free[j] = true;
    }
    for j in 0..n {
        if !is_free[j] {
            duals.bounds[j] = -grad[j];
        }
    }
    Some((x, duals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn clipped_scalar() {
        // (x - 1)² = x² - 2x + 1 -> H = 2, f = -2, constant dropped
        let p = QpProblem::boxed(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(approx(sol.x[0], 0.5, 1e-7));
        assert!(approx(sol.objective + 1.0, 0.25, 1e-7));
    }

    #[test]
    fn unconstrained() {
        let inf = f64::INFINITY;
        let p = QpProblem::boxed(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-2.0, -4.0]),
            DVector::from_element(2, -inf),
            DVector::from_element(2, inf),
        )
        .unwrap();
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(approx(sol.x[0], 2.0, 1e-6) && approx(sol.x[1], 4.0, 1e-6));
    }

    #[test]
    fn kkt_of_exact_box_optimum() {
        let p = QpProblem::boxed(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        // grad at 0.5 is 2*0.5 - 2 = -1, so the upper-bound multiplier is 1
        let x = DVector::from_element(1, 0.5);
        let duals = QpDuals {
            ineq: DVector::zeros(0),
            bounds: DVector::from_element(1, 1.0),
        };
        let r = kkt_residuals(&p, &x, &duals);
        assert!(r.max() < 1e-12);
    }

    #[test]
    fn kkt_primal_violation_is_exact() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_element(2, -10.0),
            DVector::from_element(2, 10.0),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.75, 0.5]);
        // A x - b = (1.25 - 1, 0.25 - 0)
        let r = kkt_residuals(&p, &x, &QpDuals::zeros(&p));
        assert_eq!(r.primal_feas, 0.25);
        assert_eq!(r.comp_slack, 0.0);
        assert_eq!(r.dual_feas, 0.0);
    }

    #[test]
    fn inactive_rows_have_zero_complementarity() {
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![5.0]),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let r = kkt_residuals(&p, &DVector::zeros(1), &QpDuals::zeros(&p));
        assert_eq!(r.comp_slack, 0.0);
        assert_eq!(r.stationarity, 0.0);
    }

    #[test]
    fn detects_infeasibility() {
        // x0 + x1 <= -5 with both x in [0, 1]
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![-5.0]),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_and_malformed() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let p = QpProblem::boxed(
            h,
            DVector::zeros(2),
            DVector::from_element(2, -1.0),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        assert!(matches!(
            solve_qp(&p, &QpSettings::default()),
            Err(QpError::NotPsd)
        ));
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(
            QpProblem::boxed(h, DVector::zeros(2), DVector::zeros(2), DVector::zeros(2)).is_err()
        );
        assert!(QpProblem::boxed(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DVector::zeros(1)
        )
        .is_err());
    }

    #[test]
    fn dump_round_trip() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![-1.0, 0.25]),
            DMatrix::from_row_slice(1, 2, &[1.0, -3.0]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![f64::NEG_INFINITY, 0.0]),
            DVector::from_vec(vec![1.0, f64::INFINITY]),
        )
        .unwrap();
        let text = p.to_dump();
        assert_eq!(parse_qp_dump(text.as_bytes()).unwrap(), p);
        assert!(parse_qp_dump("qp 1 0\nH\n1\nf\n".as_bytes()).is_err());
        assert!(parse_qp_dump("qp 1 0\nH\nx\n".as_bytes()).is_err());
    }

    #[test]
    fn equality_box_is_respected() {
        let p = QpProblem::boxed(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, 1.0]),
            DVector::from_vec(vec![0.4, -5.0]),
            DVector::from_vec(vec![0.4, 5.0]),
        )
        .unwrap();
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(approx(sol.x[0], 0.4, 1e-9));
        assert!(approx(sol.x[1], -1.0, 1e-6));
    }
}
