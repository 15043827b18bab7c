//! Economic MPC on an ARX prediction model: QP, masked QP and MIQP variants,
//! plus the rule-based baseline.
//!
//! The ARX recursion is condensed into `y = y_free + G u` over the horizon, so
//! the only decision variables are the inputs, the temperature slacks and (for
//! the MIQP) the on/off binaries.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use chrono::{Duration, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::billing::{classify_period, BillingError, BillingMonth, Contract};
use crate::building::{ControlPolicy, HeatPumpModel, StepContext};
use crate::model::occupancy_at;
use crate::qp::{QpDuals, QpError, QpProblem, QpSettings, QpStatus, QpWorkspace, WarmStart};
use crate::sysid::{predict, ArxInput, ArxModel, SysIdError};

pub const RULE_SETPOINT_OCCUPIED: f64 = 21.2;
pub const RULE_SETPOINT_UNOCCUPIED: f64 = 20.5;
pub const RULE_GAIN: f64 = 2.0;
const RULE_OFFSET: f64 = 0.1;

/// Default node limit for a standalone MIQP solve.
pub const DEFAULT_NODE_LIMIT: usize = 10_000;
const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum MpcError {
    #[error("forecast has {got} steps, need {need}")]
    ForecastTooShort { need: usize, got: usize },
    #[error("history too short: {0}")]
    HistoryTooShort(String),
    #[error("invalid MPC configuration: {0}")]
    InvalidConfig(String),
    #[error("prediction model unusable for MPC: {0}")]
    InvalidModel(String),
    #[error("root relaxation of the MIQP is infeasible")]
    RelaxationInfeasible,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    SysId(#[from] SysIdError),
    #[error(transparent)]
    Billing(#[from] BillingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub r_coeff: f64,
    pub s_coeff: f64,
    pub u_max: f64,
    pub u_low: f64,
    pub t_lb_occ: f64,
    pub t_ub_occ: f64,
    pub t_lb_unocc: f64,
    pub t_ub_unocc: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 48,
            r_coeff: 1.0,
            s_coeff: 1e4,
            u_max: 1.0,
            u_low: 0.0,
            t_lb_occ: 21.5,
            t_ub_occ: 24.0,
            t_lb_unocc: 16.0,
            t_ub_unocc: 24.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.r_coeff > 0.0 && self.r_coeff.is_finite())
            || !(self.s_coeff > 0.0 && self.s_coeff.is_finite())
        {
            return bad("R and S must be positive");
        }
        if !(0.0 <= self.u_low && self.u_low <= self.u_max && self.u_max <= 1.0) {
            return bad("need 0 <= u_low <= u_max <= 1");
        }
        let band_ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !band_ok(self.t_lb_occ, self.t_ub_occ) || !band_ok(self.t_lb_unocc, self.t_ub_unocc) {
            return bad("temperature bands need finite t_lb <= t_ub");
        }
        Ok(())
    }

    fn band(&self, occupied: bool) -> (f64, f64) {
        if occupied {
            (self.t_lb_occ, self.t_ub_occ)
        } else {
            (self.t_lb_unocc, self.t_ub_unocc)
        }
    }
}

/// Forecast over the horizon; index `i` is the step `k + i`.
///
/// Index 0 is the current step. The temperature `y[k+h]` is held to the band of
/// `occupied[h]` (the last entry is reused if the forecast has exactly `N` steps).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Forecast {
    /// €/kWh.
    pub prices: Vec<f64>,
    pub t_out: Vec<f64>,
    pub solar: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.prices
            .len()
            .min(self.t_out.len())
            .min(self.solar.len())
            .min(self.occupied.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, horizon: usize) -> Result<(), MpcError> {
        if self.len() < horizon {
            return Err(MpcError::ForecastTooShort {
                need: horizon,
                got: self.len(),
            });
        }
        if self.prices.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(MpcError::InvalidConfig(
                "forecast prices must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn occupied_at(&self, h: usize) -> bool {
        self.occupied[h.min(self.occupied.len() - 1)]
    }
}

/// Past outputs and inputs the ARX model needs at the current step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxHistory {
    /// Outputs up to and including the current step.
    y: VecDeque<f64>,
    /// Inputs strictly before the current step.
    x: VecDeque<ArxInput>,
}

fn past_inputs_needed(model: &ArxModel) -> usize {
    (-model.input_offset()).max(0) as usize
}

fn check_model(model: &ArxModel) -> Result<(), MpcError> {
    if model.t_d() == 0 {
        return Err(MpcError::InvalidModel(
            "input delay must be at least one step".into(),
        ));
    }
    Ok(())
}

impl ArxHistory {
    /// History padded with a constant output and input.
    pub fn constant(model: &ArxModel, y0: f64, x0: ArxInput) -> Self {
        Self {
            y: std::iter::repeat_n(y0, model.na().max(1)).collect(),
            x: std::iter::repeat_n(x0, past_inputs_needed(model)).collect(),
        }
    }

    /// History from recorded series; `y` ends with the current output and `x` ends
    /// with the input of the previous step.
    pub fn from_slices(model: &ArxModel, y: &[f64], x: &[ArxInput]) -> Result<Self, MpcError> {
        let ny = model.na().max(1);
        let nx = past_inputs_needed(model);
        if y.len() < ny || x.len() < nx {
            return Err(MpcError::HistoryTooShort(format!(
                "need {ny} outputs and {nx} inputs, got {} and {}",
                y.len(),
                x.len()
            )));
        }
        Ok(Self {
            y: y[y.len() - ny..].iter().copied().collect(),
            x: x[x.len() - nx..].iter().copied().collect(),
        })
    }

    /// Advances one step: `x_prev` was applied during the step that just ended and
    /// `y_now` is the new measurement.
    pub fn push(&mut self, x_prev: ArxInput, y_now: f64) {
        self.y.pop_front();
        self.y.push_back(y_now);
        if !self.x.is_empty() {
            self.x.pop_front();
            self.x.push_back(x_prev);
        }
    }

    pub fn current(&self) -> f64 {
        *self.y.back().expect("history is never empty")
    }

    pub fn outputs(&self) -> Vec<f64> {
        self.y.iter().copied().collect()
    }

    pub fn inputs(&self) -> Vec<ArxInput> {
        self.x.iter().copied().collect()
    }
}

/// Step response matrix `G` (lower triangular Toeplitz) of `y[k+1..=k+N]` with
/// respect to `u[k..k+N]`.
pub fn input_gain_matrix(model: &ArxModel, horizon: usize) -> Result<DMatrix<f64>, MpcError> {
    check_model(model)?;
    let window = model.input_window(horizon);
    let mut inputs = vec![[0.0; 3]; window];
    let at_k = past_inputs_needed(model);
    inputs[at_k][0] = 1.0;
    let imp = predict(model, &vec![0.0; model.na()], &inputs, horizon)?;
    Ok(DMatrix::from_fn(horizon, horizon, |r, c| {
        if c <= r {
            imp[r - c]
        } else {
            0.0
        }
    }))
}

/// Prediction of `y[k+1..=k+N]` with every future input `u` set to zero.
pub fn free_response(
    model: &ArxModel,
    hist: &ArxHistory,
    fc: &Forecast,
    horizon: usize,
) -> Result<DVector<f64>, MpcError> {
    check_model(model)?;
    fc.validate(horizon)?;
    let past = past_inputs_needed(model);
    if hist.x.len() < past || hist.y.len() < model.na() {
        return Err(MpcError::HistoryTooShort(
            "history does not match the model orders".into(),
        ));
    }
    let window = model.input_window(horizon);
    let mut inputs: Vec<ArxInput> = hist.x.iter().copied().collect();
    for i in 0..window - past {
        inputs.push([0.0, fc.t_out[i], fc.solar[i]]);
    }
    let y: Vec<f64> = hist.y.iter().copied().collect();
    Ok(DVector::from_vec(predict(model, &y, &inputs, horizon)?))
}

/// Right-hand sides of the temperature rows: `y_free - lb` then `ub - y_free`.
fn band_rhs(cfg: &MpcConfig, fc: &Forecast, y_free: &DVector<f64>, b: &mut DVector<f64>) {
    let n = cfg.horizon;
    for i in 0..n {
        let (lo, hi) = cfg.band(fc.occupied_at(i + 1));
        b[i] = y_free[i] - lo;
        b[n + i] = hi - y_free[i];
    }
}

/// Temperature rows over `cols` variables with `u` in the first `N` columns and
/// the lower and upper slacks starting at `lo_col` and `lo_col + N`.
fn band_rows(g: &DMatrix<f64>, rows: usize, cols: usize, lo_col: usize) -> DMatrix<f64> {
    let n = g.nrows();
    let mut a = DMatrix::zeros(rows, cols);
    for i in 0..n {
        for j in 0..=i {
            a[(i, j)] = -g[(i, j)];
            a[(n + i, j)] = g[(i, j)];
        }
        a[(i, lo_col + i)] = -1.0;
        a[(n + i, lo_col + n + i)] = -1.0;
    }
    a
}

fn qp_from_gain(
    g: &DMatrix<f64>,
    cfg: &MpcConfig,
    fc: &Forecast,
    y_free: &DVector<f64>,
) -> Result<QpProblem, MpcError> {
    let n = cfg.horizon;
    let nv = 3 * n;
    let h = DMatrix::from_fn(nv, nv, |r, c| {
        if r == c && r >= n {
            2.0 * cfg.s_coeff
        } else {
            0.0
        }
    });
    let f = DVector::from_fn(nv, |i, _| {
        if i < n {
            cfg.r_coeff * fc.prices[i]
        } else {
            0.0
        }
    });
    let a = band_rows(g, 2 * n, nv, n);
    let mut b = DVector::zeros(2 * n);
    band_rhs(cfg, fc, y_free, &mut b);
    let lb = DVector::zeros(nv);
    let ub = DVector::from_fn(nv, |i, _| if i < n { cfg.u_max } else { f64::INFINITY });
    Ok(QpProblem::new(h, f, a, b, lb, ub)?)
}

/// Economic QP over `z = (u_0..u_{N-1}, ε_lo, ε_hi)`:
///
/// ```text
/// min  Σ R p_t u_t + S (ε_lo,t² + ε_hi,t²)
/// s.t. lb_t - ε_lo,t ≤ y_t ≤ ub_t + ε_hi,t,   0 ≤ u_t ≤ u_max,   ε ≥ 0
/// ```
pub fn build_qp_mpc(
    model: &ArxModel,
    cfg: &MpcConfig,
    fc: &Forecast,
    hist: &ArxHistory,
) -> Result<QpProblem, MpcError> {
    cfg.validate()?;
    let y_free = free_response(model, hist, fc, cfg.horizon)?;
    let g = input_gain_matrix(model, cfg.horizon)?;
    qp_from_gain(&g, cfg, fc, &y_free)
}

/// Inputs strictly below `u_low` are switched off.
pub fn apply_mask(u_mpc: f64, u_low: f64) -> f64 {
    if u_mpc < u_low {
        0.0
    } else {
        u_mpc
    }
}

/// Proportional law around the occupied/unoccupied setpoint.
pub fn rule_based_control(t_in: f64, occupied: bool) -> f64 {
    let sp = if occupied {
        RULE_SETPOINT_OCCUPIED
    } else {
        RULE_SETPOINT_UNOCCUPIED
    };
    (RULE_GAIN * (sp + RULE_OFFSET - t_in)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpSolution {
    pub u: Vec<f64>,
    pub alpha: Vec<u8>,
    pub objective: f64,
    pub nodes_explored: usize,
    /// False when the node limit stopped the search; the incumbent is returned.
    pub complete: bool,
    /// Relative gap between the incumbent and the weakest open bound (0 when complete).
    pub gap: f64,
    x: DVector<f64>,
}

impl MiqpSolution {
    /// Whether the node limit was hit.
    pub fn node_limit_hit(&self) -> bool {
        !self.complete
    }
}

/// MIQP over `z = (u, α, ε_lo, ε_hi)` with relaxed `α ∈ [0, 1]`.
struct MiqpProblem {
    qp: QpProblem,
    n: usize,
}

impl MiqpProblem {
    fn new(g: &DMatrix<f64>, cfg: &MpcConfig, hp: &HeatPumpModel) -> Self {
        let n = cfg.horizon;
        let nv = 4 * n;
        let h = DMatrix::from_fn(nv, nv, |r, c| {
            if r == c && r >= 2 * n {
                2.0 * cfg.s_coeff
            } else {
                0.0
            }
        });
        let mut a = band_rows(g, 3 * n, nv, 2 * n);
        for i in 0..n {
            a[(2 * n + i, i)] = 1.0;
            a[(2 * n + i, n + i)] = -cfg.u_max;
        }
        let lb = DVector::zeros(nv);
        let ub = DVector::from_fn(nv, |i, _| {
            if i < n {
                cfg.u_max
            } else if i < 2 * n {
                1.0
            } else {
                f64::INFINITY
            }
        });
        // f and the band rows are filled per solve; the placeholders only fix the
        // cost scaling.
        let f = DVector::from_fn(nv, |i, _| {
            if i < n {
                cfg.r_coeff * hp.phi
            } else if i < 2 * n {
                cfg.r_coeff * hp.gamma
            } else {
                0.0
            }
        });
        let qp = QpProblem {
            h,
            f,
            a_ineq: a,
            b_ineq: DVector::zeros(3 * n),
            lb,
            ub,
        };
        Self { qp, n }
    }

    fn update(
        &mut self,
        cfg: &MpcConfig,
        hp: &HeatPumpModel,
        fc: &Forecast,
        y_free: &DVector<f64>,
    ) {
        let n = self.n;
        for i in 0..n {
            self.qp.f[i] = cfg.r_coeff * fc.prices[i] * hp.phi;
            self.qp.f[n + i] = cfg.r_coeff * fc.prices[i] * hp.gamma;
        }
        band_rhs(cfg, fc, y_free, &mut self.qp.b_ineq);
        for i in 0..n {
            self.qp.b_ineq[2 * n + i] = 0.0;
        }
    }
}

impl MiqpProblem {
    /// Feasible point with the given integral `α`: `u` clamped into
    /// `[0, α u_max]` and the smallest slacks that satisfy the band rows.
    fn repair(&self, x: &DVector<f64>, alpha: &[f64]) -> (f64, DVector<f64>) {
        let n = self.n;
        let a = &self.qp.a_ineq;
        let mut z = DVector::zeros(4 * n);
        for i in 0..n {
            z[n + i] = alpha[i];
            z[i] = x[i].clamp(0.0, alpha[i] * self.qp.ub[i]);
        }
        for r in 0..2 * n {
            let lhs: f64 = (0..n).map(|j| a[(r, j)] * z[j]).sum();
            z[2 * n + r] = (lhs - self.qp.b_ineq[r]).max(0.0);
        }
        (self.qp.objective(&z), z)
    }
}

struct Node {
    lb: Vec<f64>,
    ub: Vec<f64>,
    parent_bound: f64,
    warm: Option<WarmStart>,
}

fn with_alpha_bounds(base: &QpProblem, n: usize, lb: &[f64], ub: &[f64]) -> QpProblem {
    let mut p = base.clone();
    for i in 0..n {
        p.lb[n + i] = lb[i];
        p.ub[n + i] = ub[i];
    }
    p
}

/// Depth-first branch and bound on the most fractional `α`.
fn branch_and_bound(
    prob: &MiqpProblem,
    ws: &mut QpWorkspace,
    node_limit: usize,
    root_warm: Option<&WarmStart>,
) -> Result<MiqpSolution, MpcError> {
    let n = prob.n;
    let mut incumbent: Option<(f64, DVector<f64>)> = None;
    let mut nodes = 0usize;
    let mut stack = vec![Node {
        lb: vec![0.0; n],
        ub: vec![1.0; n],
        parent_bound: f64::NEG_INFINITY,
        warm: root_warm.cloned(),
    }];
    let prune_tol = |inc: f64| 1e-9 * (1.0 + inc.abs());

    while let Some(node) = stack.pop() {
        if let Some((inc, _)) = &incumbent {
            if node.parent_bound >= inc - prune_tol(*inc) {
                continue;
            }
        }
        if nodes >= node_limit {
            stack.push(node);
            break;
        }
        let p = with_alpha_bounds(&prob.qp, n, &node.lb, &node.ub);
        let sol = ws.solve(&p, node.warm.as_ref())?;
        nodes += 1;
        match sol.status {
            QpStatus::Infeasible => {
                if nodes == 1 {
                    return Err(MpcError::RelaxationInfeasible);
                }
                continue;
            }
            QpStatus::Optimal | QpStatus::MaxIter => {}
        }
        let bound = if sol.status == QpStatus::Optimal {
            sol.objective
        } else {
            node.parent_bound
        };
        if let Some((inc, _)) = &incumbent {
            if bound >= inc - prune_tol(*inc) {
                continue;
            }
        }

        if nodes == 1 {
            // rounding heuristic: switch on wherever the relaxation heats
            let mut lb = vec![0.0; n];
            let mut ub = vec![0.0; n];
            for i in 0..n {
                if sol.x[i] > INTEGRALITY_TOL {
                    lb[i] = 1.0;
                    ub[i] = 1.0;
                }
            }
            let hp = with_alpha_bounds(&prob.qp, n, &lb, &ub);
            let hs = ws.solve(
                &hp,
                Some(&WarmStart {
                    x: sol.x.clone(),
                    duals: None,
                }),
            )?;
            incumbent = Some(match hs.status {
                QpStatus::Optimal => (hs.objective, hs.x),
                _ => prob.repair(&hs.x, &lb),
            });
        }

        let branch = (0..n)
            .map(|i| (i, sol.x[n + i]))
            .filter(|(i, a)| node.lb[*i] != node.ub[*i] && a.min(1.0 - a) > INTEGRALITY_TOL)
            .max_by(|a, b| {
                (a.1.min(1.0 - a.1))
                    .total_cmp(&b.1.min(1.0 - b.1))
                    .then(b.0.cmp(&a.0))
            });
        match branch {
            None => {
                if sol.status == QpStatus::Optimal
                    && incumbent
                        .as_ref()
                        .is_none_or(|(inc, _)| sol.objective < *inc)
                {
                    incumbent = Some((sol.objective, sol.x.clone()));
                }
            }
            Some((i, a)) => {
                let warm = WarmStart {
                    x: sol.x.clone(),
                    duals: Some(sol.duals.clone()),
                };
                let mut down = Node {
                    lb: node.lb.clone(),
                    ub: node.ub.clone(),
                    parent_bound: bound,
                    warm: Some(warm.clone()),
                };
                down.ub[i] = 0.0;
                let mut up = Node {
                    lb: node.lb,
                    ub: node.ub,
                    parent_bound: bound,
                    warm: Some(warm),
                };
                up.lb[i] = 1.0;
                // nearer child explored first
                if a >= 0.5 {
                    stack.push(down);
                    stack.push(up);
                } else {
                    stack.push(up);
                    stack.push(down);
                }
            }
        }
    }

    // every α is feasible under soft bands, so a search that ran out of nodes
    // on unconverged relaxations still returns the heat-pump-off plan
    let (objective, x) = match incumbent {
        Some(inc) => inc,
        None => prob.repair(&DVector::zeros(4 * n), &vec![0.0; n]),
    };
    let open_bound = stack
        .iter()
        .map(|s| s.parent_bound)
        .fold(f64::INFINITY, f64::min);
    let complete = stack
        .iter()
        .all(|s| s.parent_bound >= objective - prune_tol(objective));
    let gap = if complete {
        0.0
    } else {
        ((objective - open_bound) / objective.abs().max(1.0)).max(0.0)
    };
    let u = (0..n).map(|i| x[i].clamp(0.0, f64::INFINITY)).collect();
    let alpha = (0..n).map(|i| u8::from(x[n + i] > 0.5)).collect();
    Ok(MiqpSolution {
        u,
        alpha,
        objective,
        nodes_explored: nodes,
        complete,
        gap,
        x,
    })
}

/// Iteration cap for node relaxations inside the closed loop. A node that hits
/// it keeps its parent's bound and is still branched on.
pub const CLOSED_LOOP_NODE_MAX_ITER: usize = 4000;

fn miqp_settings() -> QpSettings {
    QpSettings::default()
}

/// MIQP with start-up cost:
///
/// ```text
/// min  Σ R p_t (φ u_t + γ α_t) + S (ε_lo,t² + ε_hi,t²)
/// s.t. band rows as in the QP,   0 ≤ u_t ≤ α_t u_max,   α_t ∈ {0, 1}
/// ```
pub fn solve_miqp(
    model: &ArxModel,
    cfg: &MpcConfig,
    fc: &Forecast,
    hist: &ArxHistory,
    hp: &HeatPumpModel,
    node_limit: usize,
) -> Result<MiqpSolution, MpcError> {
    cfg.validate()?;
    if node_limit == 0 {
        return Err(MpcError::InvalidConfig(
            "node limit must be at least 1".into(),
        ));
    }
    let y_free = free_response(model, hist, fc, cfg.horizon)?;
    let g = input_gain_matrix(model, cfg.horizon)?;
    let mut prob = MiqpProblem::new(&g, cfg, hp);
    prob.update(cfg, hp, fc, &y_free);
    let mut ws = QpWorkspace::new(&prob.qp, &miqp_settings())?;
    branch_and_bound(&prob, &mut ws, node_limit, None)
}

/// MIQP objective of `(u, α)` with the slacks set to the smallest feasible values.
pub fn miqp_objective_of(
    model: &ArxModel,
    cfg: &MpcConfig,
    fc: &Forecast,
    hist: &ArxHistory,
    hp: &HeatPumpModel,
    u: &[f64],
) -> Result<f64, MpcError> {
    let n = cfg.horizon;
    let y_free = free_response(model, hist, fc, n)?;
    let g = input_gain_matrix(model, n)?;
    let y = &y_free + &g * DVector::from_column_slice(&u[..n]);
    let mut obj = 0.0;
    for i in 0..n {
        let (lo, hi) = cfg.band(fc.occupied_at(i + 1));
        let e = (lo - y[i]).max(0.0) + (y[i] - hi).max(0.0);
        let alpha = if u[i] > 0.0 { 1.0 } else { 0.0 };
        obj +=
            cfg.r_coeff * fc.prices[i] * (hp.phi * u[i] + hp.gamma * alpha) + cfg.s_coeff * e * e;
    }
    Ok(obj)
}

/// Exhaustive search over every `α` pattern, each solved as a QP. Exponential;
/// meant for short horizons.
pub fn solve_miqp_exhaustive(
    model: &ArxModel,
    cfg: &MpcConfig,
    fc: &Forecast,
    hist: &ArxHistory,
    hp: &HeatPumpModel,
) -> Result<(f64, Vec<u8>), MpcError> {
    cfg.validate()?;
    let n = cfg.horizon;
    if n > 20 {
        return Err(MpcError::InvalidConfig(
            "exhaustive search limited to 20 steps".into(),
        ));
    }
    let y_free = free_response(model, hist, fc, n)?;
    let g = input_gain_matrix(model, n)?;
    let mut prob = MiqpProblem::new(&g, cfg, hp);
    prob.update(cfg, hp, fc, &y_free);
    let mut ws = QpWorkspace::new(&prob.qp, &miqp_settings())?;
    let mut best: Option<(f64, Vec<u8>)> = None;
    for mask in 0u32..(1 << n) {
        let bits: Vec<f64> = (0..n).map(|i| ((mask >> i) & 1) as f64).collect();
        let p = with_alpha_bounds(&prob.qp, n, &bits, &bits);
        let s = ws.solve(&p, None)?;
        if s.status != QpStatus::Optimal {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| s.objective < *b) {
            best = Some((s.objective, bits.iter().map(|b| *b as u8).collect()));
        }
    }
    best.ok_or(MpcError::RelaxationInfeasible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Baseline,
    Qp,
    Mask,
    Miqp,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Baseline => "baseline",
            ControllerKind::Qp => "qp",
            ControllerKind::Mask => "mask",
            ControllerKind::Miqp => "miqp",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "rule" => Ok(ControllerKind::Baseline),
            "qp" => Ok(ControllerKind::Qp),
            "mask" => Ok(ControllerKind::Mask),
            "miqp" => Ok(ControllerKind::Miqp),
            other => Err(MpcError::InvalidConfig(format!(
                "unknown controller '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Optimal,
    NodeLimit,
    /// Solver did not converge; the rule-based law was applied instead.
    FallbackMaxIter,
    FallbackInfeasible,
    Rule,
}

/// One line of the per-step controller log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub status: StepStatus,
    pub u_first: f64,
    pub obj: f64,
    pub solve_ms: f64,
    pub masked: bool,
}

pub fn write_step_logs<W: Write>(mut w: W, logs: &[StepLog]) -> std::io::Result<()> {
    for l in logs {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

enum Solver {
    Rule,
    Qp {
        problem: QpProblem,
        ws: QpWorkspace,
    },
    Miqp {
        problem: MiqpProblem,
        ws: QpWorkspace,
        node_limit: usize,
    },
}

/// Receding-horizon controller for closed-loop simulation.
///
/// Forecasts are perfect: prices come from `contract` (using the tariff of the
/// month of the current step for the whole horizon), weather from the simulated
/// series (held at its last value past the end) and occupancy from the schedule.
pub struct MpcPolicy {
    kind: ControllerKind,
    model: ArxModel,
    cfg: MpcConfig,
    hp: HeatPumpModel,
    contract: Contract,
    gain: DMatrix<f64>,
    solver: Solver,
    history: Option<ArxHistory>,
    warm: Option<WarmStart>,
    last_u: f64,
    logs: Vec<StepLog>,
}

/// Builds the closed-loop policy for `kind`. `node_limit` only matters for the MIQP.
pub fn mpc_policy(
    kind: ControllerKind,
    model: &ArxModel,
    cfg: &MpcConfig,
    hp: &HeatPumpModel,
    contract: &Contract,
    node_limit: usize,
) -> Result<MpcPolicy, MpcError> {
    cfg.validate()?;
    check_model(model)?;
    if node_limit == 0 {
        return Err(MpcError::InvalidConfig(
            "node limit must be at least 1".into(),
        ));
    }
    let n = cfg.horizon;
    let gain = input_gain_matrix(model, n)?;
    let placeholder = Forecast {
        prices: vec![1.0; n + 1],
        t_out: vec![0.0; n + 1],
        solar: vec![0.0; n + 1],
        occupied: vec![false; n + 1],
    };
    let solver = match kind {
        ControllerKind::Baseline => Solver::Rule,
        ControllerKind::Qp | ControllerKind::Mask => {
            let problem = qp_from_gain(&gain, cfg, &placeholder, &DVector::zeros(n))?;
            let ws = QpWorkspace::new(&problem, &QpSettings::default())?;
            Solver::Qp { problem, ws }
        }
        ControllerKind::Miqp => {
            let problem = MiqpProblem::new(&gain, cfg, hp);
            let settings = QpSettings {
                max_iter: CLOSED_LOOP_NODE_MAX_ITER,
                ..miqp_settings()
            };
            let ws = QpWorkspace::new(&problem.qp, &settings)?;
            Solver::Miqp {
                problem,
                ws,
                node_limit,
            }
        }
    };
    Ok(MpcPolicy {
        kind,
        model: model.clone(),
        cfg: *cfg,
        hp: *hp,
        contract: contract.clone(),
        gain,
        solver,
        history: None,
        warm: None,
        last_u: 0.0,
        logs: Vec::new(),
    })
}

/// Shifts every length-`n` block of `v` one step forward, repeating the last entry.
fn shift_blocks(v: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = v.clone();
    for b in 0..v.len() / n {
        for i in 0..n {
            out[b * n + i] = v[b * n + (i + 1).min(n - 1)];
        }
    }
    out
}

impl MpcPolicy {
    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn logs(&self) -> &[StepLog] {
        &self.logs
    }

    pub fn take_logs(&mut self) -> Vec<StepLog> {
        std::mem::take(&mut self.logs)
    }

    /// Input gain matrix of the prediction model over the horizon.
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    fn forecast(&self, ctx: &StepContext<'_>) -> Result<Forecast, MpcError> {
        let n = self.cfg.horizon + 1;
        let tariff = self.contract.tariff_for(BillingMonth::of(ctx.timestamp))?;
        let dt = Duration::seconds(ctx.weather.grid().step_seconds() as i64);
        let mut fc = Forecast {
            prices: Vec::with_capacity(n),
            t_out: Vec::with_capacity(n),
            solar: Vec::with_capacity(n),
            occupied: Vec::with_capacity(n),
        };
        let mut ts: NaiveDateTime = ctx.timestamp;
        for i in 0..n {
            let (t_out, solar) = ctx.weather.at_clamped((ctx.step + i) as isize);
            fc.prices.push(tariff.price(classify_period(ts)));
            fc.t_out.push(t_out);
            fc.solar.push(solar);
            fc.occupied.push(occupancy_at(ctx.schedule, ts));
            ts += dt;
        }
        Ok(fc)
    }

    fn update_history(&mut self, ctx: &StepContext<'_>) {
        let y = ctx.state.t_in;
        match &mut self.history {
            Some(h) => {
                let (t_out, solar) = ctx.weather.at_clamped(ctx.step as isize - 1);
                h.push([self.last_u, t_out, solar], y);
            }
            None => {
                let (t_out, solar) = ctx.weather.at_clamped(ctx.step as isize);
                self.history = Some(ArxHistory::constant(&self.model, y, [0.0, t_out, solar]));
            }
        }
    }

    fn step(&mut self, ctx: &StepContext<'_>) -> Result<f64, MpcError> {
        self.update_history(ctx);
        let occupied_now = occupancy_at(ctx.schedule, ctx.timestamp);
        let fallback = rule_based_control(ctx.state.t_in, occupied_now).min(self.cfg.u_max);
        let n = self.cfg.horizon;
        let started = Instant::now();

        let (status, u_first, obj) = match &mut self.solver {
            Solver::Rule => (
                StepStatus::Rule,
                rule_based_control(ctx.state.t_in, occupied_now),
                0.0,
            ),
            _ => {
                let fc = self.forecast(ctx)?;
                let hist = self.history.as_ref().expect("history initialised above");
                let y_free = free_response(&self.model, hist, &fc, n)?;
                match &mut self.solver {
                    Solver::Qp { problem, ws } => {
                        for i in 0..n {
                            problem.f[i] = self.cfg.r_coeff * fc.prices[i];
                        }
                        band_rhs(&self.cfg, &fc, &y_free, &mut problem.b_ineq);
                        let sol = ws.solve(problem, self.warm.as_ref())?;
                        match sol.status {
                            QpStatus::Optimal => {
                                self.warm = Some(WarmStart {
                                    x: shift_blocks(&sol.x, n),
                                    duals: Some(QpDuals {
                                        ineq: shift_blocks(&sol.duals.ineq, n),
                                        bounds: shift_blocks(&sol.duals.bounds, n),
                                    }),
                                });
                                (StepStatus::Optimal, sol.x[0], sol.objective)
                            }
                            other => {
                                self.warm = None;
                                log::warn!(
                                    "step {}: QP returned {:?}, applying rule-based input",
                                    ctx.step,
                                    other
                                );
                                let st = if other == QpStatus::Infeasible {
                                    StepStatus::FallbackInfeasible
                                } else {
                                    StepStatus::FallbackMaxIter
                                };
                                (st, fallback, sol.objective)
                            }
                        }
                    }
                    Solver::Miqp {
                        problem,
                        ws,
                        node_limit,
                    } => {
                        problem.update(&self.cfg, &self.hp, &fc, &y_free);
                        let sol = branch_and_bound(problem, ws, *node_limit, self.warm.as_ref())?;
                        self.warm = Some(WarmStart {
                            x: shift_blocks(&sol.x, n),
                            duals: None,
                        });
                        let st = if sol.complete {
                            StepStatus::Optimal
                        } else {
                            StepStatus::NodeLimit
                        };
                        (st, sol.u[0], sol.objective)
                    }
                    Solver::Rule => unreachable!(),
                }
            }
        };
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;

        let u_first = u_first.clamp(0.0, 1.0);
        let cap = if matches!(status, StepStatus::Rule) {
            1.0
        } else {
            self.cfg.u_max
        };
        let mut u = u_first.min(cap);
        let mut masked = false;
        if self.kind == ControllerKind::Mask {
            let m = apply_mask(u, self.cfg.u_low);
            masked = m != u;
            u = m;
        }
        self.logs.push(StepLog {
            t: ctx.step,
            status,
            u_first,
            obj,
            solve_ms,
            masked,
        });
        self.last_u = u;
        Ok(u)
    }
}

impl ControlPolicy for MpcPolicy {
    fn control(
        &mut self,
        ctx: &StepContext<'_>,
    ) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
        Ok(self.step(ctx)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_qp, QpSettings};

    fn first_order() -> ArxModel {
        // y[t] = 0.9 y[t-1] + 0.5 u[t-1] + 0.1 t_out[t-1]
        ArxModel::new(vec![-0.9], vec![[0.5, 0.1, 0.0]], 1).unwrap()
    }

    fn flat_forecast(n: usize, price: f64, t_out: f64) -> Forecast {
        Forecast {
            prices: vec![price; n + 1],
            t_out: vec![t_out; n + 1],
            solar: vec![0.0; n + 1],
            occupied: vec![true; n + 1],
        }
    }

    #[test]
    fn gain_matrix_is_impulse_toeplitz() {
        let g = input_gain_matrix(&first_order(), 3).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((g[(1, 0)] - 0.45).abs() < 1e-15);
        assert!((g[(2, 1)] - 0.45).abs() < 1e-15);
        assert!((g[(2, 0)] - 0.405).abs() < 1e-15);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn repaired_point_is_feasible() {
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 5,
            ..Default::default()
        };
        let hp = HeatPumpModel::default();
        let hist = ArxHistory::constant(&m, 18.0, [0.0, 2.0, 0.0]);
        let fc = flat_forecast(5, 0.3, 2.0);
        let g = input_gain_matrix(&m, 5).unwrap();
        let y_free = free_response(&m, &hist, &fc, 5).unwrap();
        let mut prob = MiqpProblem::new(&g, &cfg, &hp);
        prob.update(&cfg, &hp, &fc, &y_free);
        let x = DVector::from_fn(20, |i, _| if i < 5 { 3.0 - i as f64 } else { -1.0 });
        let alpha = [1.0, 0.0, 1.0, 0.0, 1.0];
        let (obj, z) = prob.repair(&x, &alpha);
        let slack = &prob.qp.a_ineq * &z - &prob.qp.b_ineq;
        assert!(slack.max() <= 1e-12, "{slack}");
        for i in 0..20 {
            assert!(z[i] >= prob.qp.lb[i] && z[i] <= prob.qp.ub[i]);
        }
        assert_eq!(z[1], 0.0);
        assert_eq!(z[0], cfg.u_max);
        assert!((obj - prob.qp.objective(&z)).abs() < 1e-12);
    }

    #[test]
    fn warm_building_stays_off() {
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 6,
            t_lb_occ: 15.0,
            ..Default::default()
        };
        // the zone relaxes towards 20 °C, well above the 15 °C bound
        let hist = ArxHistory::constant(&m, 22.0, [0.0, 20.0, 0.0]);
        let fc = flat_forecast(6, 0.3, 20.0);
        let p = build_qp_mpc(&m, &cfg, &fc, &hist).unwrap();
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        for i in 0..6 {
            assert!(s.x[i].abs() < 1e-6, "{}", s.x);
        }
    }

    #[test]
    fn single_step_matches_hand_kkt() {
        // y1 = 0.9·20 + 0.5 u + 0.1·0 = 18 + 0.5u must reach 20 → u = 4 > u_max,
        // so u = 1 and ε = 1.5; the cost S ε² dominates.
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 1,
            t_lb_occ: 20.0,
            t_ub_occ: 30.0,
            s_coeff: 100.0,
            ..Default::default()
        };
        let hist = ArxHistory::constant(&m, 20.0, [0.0, 0.0, 0.0]);
        let fc = flat_forecast(1, 0.2, 0.0);
        let p = build_qp_mpc(&m, &cfg, &fc, &hist).unwrap();
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-6);
        assert!((s.x[1] - 1.5).abs() < 1e-6);
        assert!(s.x[2].abs() < 1e-6);
        assert!((s.objective - (0.2 + 100.0 * 2.25)).abs() < 1e-5);

        // With a reachable target: y1 = 18 + 0.5u ≥ 18.2 costs 0.2u or 100 ε².
        // Minimizing 0.2u + 100(0.2 - 0.5u)² gives u = 0.4 - 0.2/(2·100·0.25) = 0.396.
        let cfg = MpcConfig {
            t_lb_occ: 18.2,
            ..cfg
        };
        let p = build_qp_mpc(&m, &cfg, &fc, &hist).unwrap();
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((s.x[0] - 0.396).abs() < 1e-6, "{}", s.x);
        assert!((s.x[1] - 0.002).abs() < 1e-6);
    }

    #[test]
    fn mask_rule() {
        assert_eq!(apply_mask(0.05, 0.1), 0.0);
        assert_eq!(apply_mask(0.1, 0.1), 0.1);
        for u in [0.0, 0.01, 0.5, 1.0] {
            assert_eq!(apply_mask(u, 0.0), u);
        }
    }

    #[test]
    fn rule_based_law() {
        assert_eq!(rule_based_control(25.0, true), 0.0);
        assert_eq!(rule_based_control(15.0, true), 1.0);
        assert!((rule_based_control(21.05, true) - 0.5).abs() < 1e-12);
        assert!((rule_based_control(20.35, false) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        assert!(MpcConfig {
            horizon: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MpcConfig {
            u_low: 0.9,
            u_max: 0.8,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MpcConfig {
            s_coeff: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MpcConfig {
            t_lb_occ: 25.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn short_inputs_are_rejected() {
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 5,
            ..Default::default()
        };
        let hist = ArxHistory::constant(&m, 20.0, [0.0; 3]);
        let fc = flat_forecast(2, 0.2, 0.0);
        assert!(matches!(
            build_qp_mpc(&m, &cfg, &fc, &hist),
            Err(MpcError::ForecastTooShort { .. })
        ));
        let m2 = ArxModel::new(vec![-0.5, 0.1], vec![[0.5, 0.1, 0.0]; 3], 2).unwrap();
        assert!(matches!(
            ArxHistory::from_slices(&m2, &[1.0], &[]),
            Err(MpcError::HistoryTooShort(_))
        ));
        let m0 = ArxModel::new(vec![-0.5], vec![[0.5, 0.1, 0.0]], 0).unwrap();
        assert!(matches!(
            input_gain_matrix(&m0, 3),
            Err(MpcError::InvalidModel(_))
        ));
    }

    #[test]
    fn zero_startup_cost_miqp_equals_qp() {
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 4,
            t_lb_occ: 19.0,
            ..Default::default()
        };
        let hp = HeatPumpModel {
            gamma: 0.0,
            phi: 1.0,
            ..Default::default()
        };
        let hist = ArxHistory::constant(&m, 18.0, [0.0, 5.0, 0.0]);
        let fc = flat_forecast(4, 0.3, 5.0);
        let qp = solve_qp(
            &build_qp_mpc(&m, &cfg, &fc, &hist).unwrap(),
            &QpSettings::default(),
        )
        .unwrap();
        let mi = solve_miqp(&m, &cfg, &fc, &hist, &hp, 1000).unwrap();
        assert!(mi.complete);
        assert!(
            (qp.objective - mi.objective).abs() < 1e-6,
            "{} {}",
            qp.objective,
            mi.objective
        );
    }

    #[test]
    fn free_prices_give_zero_objective() {
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 4,
            t_lb_occ: 19.0,
            ..Default::default()
        };
        // outdoor 15 °C pulls the zone below 19 °C by the third step unless heated
        let hist = ArxHistory::constant(&m, 20.0, [0.0, 15.0, 0.0]);
        let fc = flat_forecast(4, 0.0, 15.0);
        let mi = solve_miqp(&m, &cfg, &fc, &hist, &HeatPumpModel::default(), 1000).unwrap();
        assert!(mi.objective.abs() < 1e-6, "{}", mi.objective);
        assert!(mi.u.iter().any(|u| *u > 0.0));
        for (u, a) in mi.u.iter().zip(&mi.alpha) {
            assert!(*a == 0 || *a == 1);
            assert!(*u <= f64::from(*a) * cfg.u_max + 1e-6);
        }
    }

    #[test]
    fn branch_and_bound_matches_enumeration() {
        let m = first_order();
        let hp = HeatPumpModel::default();
        for (n, y0, lb) in [(3, 18.0, 19.0), (4, 17.0, 20.0), (5, 18.5, 19.0)] {
            let cfg = MpcConfig {
                horizon: n,
                t_lb_occ: lb,
                ..Default::default()
            };
            let hist = ArxHistory::constant(&m, y0, [0.0, 8.0, 0.0]);
            let mut fc = flat_forecast(n, 0.3, 8.0);
            for (i, p) in fc.prices.iter_mut().enumerate() {
                *p = 0.1 + 0.05 * i as f64;
            }
            let bb = solve_miqp(&m, &cfg, &fc, &hist, &hp, DEFAULT_NODE_LIMIT).unwrap();
            let (ex, _) = solve_miqp_exhaustive(&m, &cfg, &fc, &hist, &hp).unwrap();
            assert!(bb.complete);
            assert!(
                (bb.objective - ex).abs() < 1e-5,
                "n={n}: {} vs {ex}",
                bb.objective
            );
        }
    }

    #[test]
    fn node_limit_returns_incumbent() {
        let m = first_order();
        let cfg = MpcConfig {
            horizon: 6,
            t_lb_occ: 20.0,
            ..Default::default()
        };
        let hist = ArxHistory::constant(&m, 17.0, [0.0, 8.0, 0.0]);
        let fc = flat_forecast(6, 0.3, 8.0);
        let s = solve_miqp(&m, &cfg, &fc, &hist, &HeatPumpModel::default(), 1).unwrap();
        assert_eq!(s.nodes_explored, 1);
        assert!(s.node_limit_hit() || s.gap == 0.0);
        assert!(s.gap >= 0.0);
    }

    #[test]
    fn history_push_rolls_window() {
        let m = ArxModel::new(vec![-0.5, 0.1], vec![[0.5, 0.1, 0.0]; 2], 2).unwrap();
        let mut h = ArxHistory::constant(&m, 1.0, [0.0; 3]);
        assert_eq!(h.inputs().len(), 2);
        h.push([1.0, 2.0, 3.0], 4.0);
        assert_eq!(h.outputs(), vec![1.0, 4.0]);
        assert_eq!(h.inputs()[1], [1.0, 2.0, 3.0]);
        assert_eq!(h.current(), 4.0);
    }

    #[test]
    fn step_log_jsonl() {
        let l = StepLog {
            t: 3,
            status: StepStatus::Optimal,
            u_first: 0.25,
            obj: 1.5,
            solve_ms: 0.5,
            masked: false,
        };
        let mut buf = Vec::new();
        write_step_logs(&mut buf, std::slice::from_ref(&l)).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("\"status\":\"optimal\""));
        let back: StepLog = serde_json::from_str(s.trim()).unwrap();
        assert_eq!(back, l);
    }
}
