//! Constrained Bayesian optimization with lower-confidence-bound surrogates.
//!
//! The objective `J` and constraint `g` each get an independent GP. Every
//! iteration first checks whether the constraint LCB is positive on the whole
//! candidate set (declare infeasibility and stop), and otherwise evaluates the
//! candidate minimizing the objective LCB among those whose constraint LCB is
//! non-positive.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gp::{fit, GpError, GpPosterior, Kernel, KernelKind};

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    InvalidParams(String),
    #[error("no candidate satisfies the constraint bound")]
    NoFeasibleCandidate,
    #[error("blackbox failed at iteration {iteration} for theta {theta:?}: {source}")]
    BlackboxFailure {
        iteration: usize,
        theta: Vec<f64>,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("evaluation log line {line}: {msg}")]
    Log { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned search box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ConfigError> {
        let d = Self { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() || self.lo.len() > PRIMES.len() {
            return Err(ConfigError::InvalidParams(format!(
                "domain bounds must have equal length between 1 and {}",
                PRIMES.len()
            )));
        }
        if self
            .lo
            .iter()
            .zip(&self.hi)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(ConfigError::InvalidParams(
                "every domain interval needs lo < hi".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn to_unit(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(i, t)| (t - self.lo[i]) / (self.hi[i] - self.lo[i]))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| {
                (self.lo[i] + v * (self.hi[i] - self.lo[i])).clamp(self.lo[i], self.hi[i])
            })
            .collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .enumerate()
                .all(|(i, t)| *t >= self.lo[i] && *t <= self.hi[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant {
        value: f64,
    },
    /// `sqrt(base + scale · ln(k + 1))` at iteration `k`.
    LogGrowth {
        base: f64,
        scale: f64,
    },
}

impl BetaSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            BetaSchedule::Constant { value } => value,
            BetaSchedule::LogGrowth { base, scale } => {
                (base + scale * ((k + 1) as f64).ln()).max(0.0).sqrt()
            }
        }
    }
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Constant { value: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigParams {
    pub domain: Domain,
    pub beta: BetaSchedule,
    /// Total evaluation budget, initial design included.
    pub max_iters: usize,
    pub n_init: usize,
    pub seed: u64,
    pub kernel: KernelKind,
    pub lengthscale: f64,
    pub noise_var: f64,
    pub n_candidates: usize,
    pub n_local: usize,
    pub local_std: f64,
}

impl Default for ConfigParams {
    fn default() -> Self {
        Self {
            domain: Domain::unit(1),
            beta: BetaSchedule::default(),
            max_iters: 25,
            n_init: 8,
            seed: 0,
            kernel: KernelKind::Matern52,
            lengthscale: 0.2,
            noise_var: 1e-8,
            n_candidates: 2048,
            n_local: 256,
            local_std: 0.05,
        }
    }
}

impl ConfigParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.domain.validate()?;
        if self.max_iters == 0 || self.n_init == 0 {
            return Err(ConfigError::InvalidParams(
                "max_iters and n_init must be at least 1".into(),
            ));
        }
        if self.n_candidates == 0 {
            return Err(ConfigError::InvalidParams(
                "candidate set must be non-empty".into(),
            ));
        }
        if !(self.lengthscale > 0.0) || !(self.noise_var > 0.0) || !(self.local_std >= 0.0) {
            return Err(ConfigError::InvalidParams(
                "lengthscale, noise_var and local_std must be positive".into(),
            ));
        }
        if self.beta.at(0) < 0.0 || !self.beta.at(0).is_finite() {
            return Err(ConfigError::InvalidParams(
                "beta must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn kernel(&self) -> Result<Kernel, GpError> {
        Kernel::new(self.kernel, vec![self.lengthscale; self.domain.dim()], 1.0)
    }
}

/// One blackbox evaluation as returned by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub g: f64,
    /// Free-form details stored alongside the record.
    pub info: Option<serde_json::Value>,
}

impl From<(f64, f64)> for Evaluation {
    fn from((j, g): (f64, f64)) -> Self {
        Self { j, g, info: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub k: usize,
    pub theta: Vec<f64>,
    pub j_eur: f64,
    pub g: f64,
    pub feasible: bool,
    /// Wall-clock seconds of the evaluation; absent in report copies.
    #[serde(default)]
    pub wall_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub history: Vec<EvalRecord>,
    pub best_feasible: Option<EvalRecord>,
    pub infeasibility_declared: bool,
}

impl TuningResult {
    /// Best feasible objective after each evaluation (`None` until one is feasible).
    pub fn incumbent_trace(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.history
            .iter()
            .map(|r| {
                if r.feasible && best.is_none_or(|b| r.j_eur < b) {
                    best = Some(r.j_eur);
                }
                best
            })
            .collect()
    }
}

pub fn best_feasible(history: &[EvalRecord]) -> Option<EvalRecord> {
    history
        .iter()
        .filter(|r| r.feasible)
        .fold(None::<&EvalRecord>, |best, r| match best {
            Some(b) if b.j_eur <= r.j_eur => Some(b),
            _ => Some(r),
        })
        .cloned()
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u32) -> f64 {
    let b = b as u64;
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Latin-hypercube sample of `n` points in the unit cube.
pub fn latin_hypercube(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, u64::MAX);
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        for (i, p) in pts.iter_mut().enumerate() {
            p[d] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Candidate set for iteration `iteration`, in unit coordinates: a randomly
/// shifted Halton sequence followed by Gaussian perturbations of `incumbent`.
pub fn candidate_set(
    params: &ConfigParams,
    iteration: usize,
    incumbent: Option<&[f64]>,
) -> Vec<Vec<f64>> {
    let dim = params.domain.dim();
    let mut rng = rng_for(params.seed, iteration as u64);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(params.n_candidates + params.n_local);
    for i in 1..=params.n_candidates as u64 {
        out.push(
            (0..dim)
                .map(|d| (radical_inverse(i, PRIMES[d]) + shift[d]).fract())
                .collect(),
        );
    }
    if let (Some(c), true) = (incumbent, params.local_std > 0.0) {
        let normal = Normal::new(0.0, params.local_std).expect("positive std");
        for _ in 0..params.n_local {
            out.push(
                c.iter()
                    .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect(),
            );
        }
    }
    out
}

/// True when some candidate has a non-positive constraint LCB.
pub fn check_feasibility(
    gp_g: &GpPosterior,
    beta_sqrt: f64,
    candidates: &[Vec<f64>],
) -> Result<bool, GpError> {
    for c in candidates {
        if gp_g.lcb(c, beta_sqrt)? <= 0.0 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Index of the candidate minimizing the objective LCB subject to a
/// non-positive constraint LCB; the first index wins ties.
pub fn propose_next(
    gp_j: &GpPosterior,
    gp_g: &GpPosterior,
    beta_sqrt: f64,
    candidates: &[Vec<f64>],
) -> Result<usize, ConfigError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if gp_g.lcb(c, beta_sqrt)? > 0.0 {
            continue;
        }
        let v = gp_j.lcb(c, beta_sqrt)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or(ConfigError::NoFeasibleCandidate)
}

fn standardize(y: &[f64]) -> Vec<f64> {
    if y.is_empty() {
        return Vec::new();
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    y.iter().map(|v| (v - mean) / std).collect()
}

/// Objective GP (standardized observations) and constraint GP (raw) on unit coordinates.
pub fn fit_surrogates(
    params: &ConfigParams,
    history: &[EvalRecord],
) -> Result<(GpPosterior, GpPosterior), GpError> {
    let kernel = params.kernel()?;
    let x: Vec<Vec<f64>> = history
        .iter()
        .map(|r| params.domain.to_unit(&r.theta))
        .collect();
    let j: Vec<f64> = history.iter().map(|r| r.j_eur).collect();
    let g: Vec<f64> = history.iter().map(|r| r.g).collect();
    Ok((
        fit(&x, &standardize(&j), &kernel, params.noise_var)?,
        fit(&x, &g, &kernel, params.noise_var)?,
    ))
}

fn incumbent(params: &ConfigParams, history: &[EvalRecord]) -> Option<Vec<f64>> {
    let pick = best_feasible(history)
        .or_else(|| history.iter().min_by(|a, b| a.g.total_cmp(&b.g)).cloned());
    pick.map(|r| params.domain.to_unit(&r.theta))
}

pub fn run_config<F, E, O>(blackbox: F, params: &ConfigParams) -> Result<TuningResult, ConfigError>
where
    F: FnMut(&[f64]) -> Result<O, E>,
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
    O: Into<Evaluation>,
{
    resume_config(blackbox, params, Vec::new(), |_| Ok(()))
}

/// Runs (or continues) a tuning loop. `history` holds records from an earlier,
/// interrupted run with the same parameters; `observe` sees every new record.
pub fn resume_config<F, E, O, C>(
    mut blackbox: F,
    params: &ConfigParams,
    history: Vec<EvalRecord>,
    mut observe: C,
) -> Result<TuningResult, ConfigError>
where
    F: FnMut(&[f64]) -> Result<O, E>,
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
    O: Into<Evaluation>,
    C: FnMut(&EvalRecord) -> Result<(), ConfigError>,
{
    params.validate()?;
    let dim = params.domain.dim();
    let mut history = history;
    for (i, r) in history.iter().enumerate() {
        if r.k != i + 1
            || !params.domain.contains(&r.theta)
            || !r.j_eur.is_finite()
            || !r.g.is_finite()
        {
            return Err(ConfigError::Log {
                line: i + 1,
                msg: "record does not fit this run".into(),
            });
        }
    }
    history.truncate(params.max_iters);
    let init = latin_hypercube(params.n_init, dim, params.seed);

    let mut evaluate =
        |k: usize, theta: Vec<f64>, history: &mut Vec<EvalRecord>| -> Result<(), ConfigError> {
            let t0 = Instant::now();
            let ev: Evaluation = blackbox(&theta)
                .map_err(|e| ConfigError::BlackboxFailure {
                    iteration: k,
                    theta: theta.clone(),
                    source: e.into(),
                })?
                .into();
            if !ev.j.is_finite() || !ev.g.is_finite() {
                return Err(ConfigError::BlackboxFailure {
                    iteration: k,
                    theta,
                    source: "non-finite objective or constraint".into(),
                });
            }
            let rec = EvalRecord {
                k,
                theta,
                j_eur: ev.j,
                g: ev.g,
                feasible: ev.g <= 0.0,
                wall_s: t0.elapsed().as_secs_f64(),
                info: ev.info,
            };
            observe(&rec)?;
            history.push(rec);
            Ok(())
        };

    let mut infeasible = false;
    while history.len() < params.max_iters {
        let k = history.len() + 1;
        if k <= params.n_init {
            let theta = params.domain.from_unit(&init[k - 1]);
            evaluate(k, theta, &mut history)?;
            continue;
        }
        let (gp_j, gp_g) = fit_surrogates(params, &history)?;
        let beta = params.beta.at(k);
        let candidates = candidate_set(params, k, incumbent(params, &history).as_deref());
        if !check_feasibility(&gp_g, beta, &candidates)? {
            log::info!("constraint bound positive on all candidates at iteration {k}; declaring infeasibility");
            infeasible = true;
            break;
        }
        let idx = propose_next(&gp_j, &gp_g, beta, &candidates)?;
        let theta = params.domain.from_unit(&candidates[idx]);
        evaluate(k, theta, &mut history)?;
    }
    Ok(TuningResult {
        best_feasible: best_feasible(&history),
        history,
        infeasibility_declared: infeasible,
    })
}

pub fn write_eval_record<W: Write>(mut w: W, rec: &EvalRecord) -> Result<(), ConfigError> {
    let line = serde_json::to_string(rec).map_err(|e| ConfigError::Log {
        line: rec.k,
        msg: e.to_string(),
    })?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// Reads an evaluation log, one JSON record per line; blank lines are skipped.
pub fn read_eval_log<R: BufRead>(reader: R) -> Result<Vec<EvalRecord>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).map_err(|e| ConfigError::Log {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !rec.j_eur.is_finite() || !rec.g.is_finite() || rec.theta.iter().any(|t| !t.is_finite())
        {
            return Err(ConfigError::Log {
                line: i + 1,
                msg: "non-finite value".into(),
            });
        }
        if rec.feasible != (rec.g <= 0.0) {
            return Err(ConfigError::Log {
                line: i + 1,
                msg: "feasible flag disagrees with g".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
