//! Zero-mean Gaussian process regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const JITTER_RETRIES: usize = 3;
const VARIANCE_CLAMP: f64 = 1e-10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GpError {
    #[error("Cholesky factorization failed after {0} jitter increases")]
    CholeskyFailure(usize),
    #[error("posterior variance {0} is negative beyond round-off")]
    NegativeVariance(f64),
    #[error("invalid GP input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    SquaredExponential,
    Matern52,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl Kernel {
    pub fn new(kind: KernelKind, lengthscales: Vec<f64>, variance: f64) -> Result<Self, GpError> {
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(GpError::InvalidInput(
                "lengthscales must be positive".into(),
            ));
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(GpError::InvalidInput(
                "signal variance must be positive".into(),
            ));
        }
        Ok(Self {
            kind,
            lengthscales,
            variance,
        })
    }

    /// Matérn 5/2 with unit variance and the same lengthscale in every dimension.
    pub fn matern52(dim: usize, lengthscale: f64) -> Result<Self, GpError> {
        Self::new(KernelKind::Matern52, vec![lengthscale; dim], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        match self.kind {
            KernelKind::SquaredExponential => self.variance * (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let s = (5.0 * r2).sqrt();
                self.variance * (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: Kernel,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    noise_var: f64,
    /// Diagonal term actually used, `noise_var` times any jitter escalation.
    effective_noise: f64,
    /// Lower Cholesky factor of `K + effective_noise·I`.
    chol: DMatrix<f64>,
    /// `L⁻¹ y`.
    white_y: DVector<f64>,
}

pub fn fit(
    x: &[Vec<f64>],
    y: &[f64],
    kernel: &Kernel,
    noise_var: f64,
) -> Result<GpPosterior, GpError> {
    if x.len() != y.len() {
        return Err(GpError::InvalidInput(format!(
            "{} points but {} observations",
            x.len(),
            y.len()
        )));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(GpError::InvalidInput(
            "noise variance must be positive".into(),
        ));
    }
    if x.iter()
        .any(|p| p.len() != kernel.dim() || p.iter().any(|v| !v.is_finite()))
        || y.iter().any(|v| !v.is_finite())
    {
        return Err(GpError::InvalidInput(
            "points must match the kernel dimension and be finite".into(),
        ));
    }
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(&x[i], &x[j]));
    let mut jitter = noise_var;
    let mut chol = None;
    for _ in 0..=JITTER_RETRIES {
        let mut kk = k.clone();
        for i in 0..n {
            kk[(i, i)] += jitter;
        }
        if let Some(c) = kk.cholesky() {
            chol = Some(c.unpack());
            break;
        }
        jitter *= 10.0;
    }
    let chol = chol.ok_or(GpError::CholeskyFailure(JITTER_RETRIES))?;
    let yv = DVector::from_column_slice(y);
    let white_y = chol
        .solve_lower_triangular(&yv)
        .ok_or(GpError::CholeskyFailure(JITTER_RETRIES))?;
    Ok(GpPosterior {
        kernel: kernel.clone(),
        train_x: x.to_vec(),
        train_y: y.to_vec(),
        noise_var,
        effective_noise: jitter,
        chol,
        white_y,
    })
}

impl GpPosterior {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn train_x(&self) -> &[Vec<f64>] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn effective_noise(&self) -> f64 {
        self.effective_noise
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K + λI`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn len(&self) -> usize {
        self.train_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_y.is_empty()
    }

    /// Posterior mean and variance at `theta`.
    pub fn posterior_at(&self, theta: &[f64]) -> Result<(f64, f64), GpError> {
        if theta.len() != self.kernel.dim() {
            return Err(GpError::InvalidInput("query dimension mismatch".into()));
        }
        let prior = self.kernel.eval(theta, theta);
        if self.is_empty() {
            return Ok((0.0, prior));
        }
        let ks = DVector::from_iterator(
            self.len(),
            self.train_x.iter().map(|x| self.kernel.eval(x, theta)),
        );
        let v = self
            .chol
            .solve_lower_triangular(&ks)
            .ok_or(GpError::CholeskyFailure(0))?;
        let mean = v.dot(&self.white_y);
        let var = prior - v.dot(&v);
        if var < 0.0 {
            if var < -VARIANCE_CLAMP {
                return Err(GpError::NegativeVariance(var));
            }
            return Ok((mean, 0.0));
        }
        Ok((mean, var))
    }

    /// Lower confidence bound `mean - beta_sqrt * std`.
    pub fn lcb(&self, theta: &[f64], beta_sqrt: f64) -> Result<f64, GpError> {
        let (m, v) = self.posterior_at(theta)?;
        Ok(m - beta_sqrt * v.sqrt())
    }

    /// Log marginal likelihood of the training data.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let log_det: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * self.white_y.dot(&self.white_y)
            - 0.5 * log_det
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Fits with the shared lengthscale from `grid` that maximizes the marginal likelihood.
pub fn fit_best_lengthscale(
    x: &[Vec<f64>],
    y: &[f64],
    kind: KernelKind,
    variance: f64,
    noise_var: f64,
    grid: &[f64],
) -> Result<GpPosterior, GpError> {
    let dim = x
        .first()
        .map(|p| p.len())
        .ok_or_else(|| GpError::InvalidInput("no data".into()))?;
    let mut best: Option<GpPosterior> = None;
    for &l in grid {
        let gp = fit(x, y, &Kernel::new(kind, vec![l; dim], variance)?, noise_var)?;
        if best
            .as_ref()
            .is_none_or(|b| gp.log_marginal_likelihood() > b.log_marginal_likelihood())
        {
            best = Some(gp);
        }
    }
    best.ok_or_else(|| GpError::InvalidInput("empty lengthscale grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_without_data() {
        let k = Kernel::matern52(2, 0.2).unwrap();
        let gp = fit(&[], &[], &k, 1e-6).unwrap();
        assert_eq!(gp.posterior_at(&[0.3, 0.4]).unwrap(), (0.0, 1.0));
        assert_eq!(gp.lcb(&[0.3, 0.4], 2.0).unwrap(), -2.0);
    }

    #[test]
    fn one_point_closed_form() {
        let k = Kernel::new(KernelKind::SquaredExponential, vec![0.5], 1.0).unwrap();
        let gp = fit(&[vec![0.2]], &[3.0], &k, 0.25).unwrap();
        let (m, v) = gp.posterior_at(&[0.2]).unwrap();
        assert!((m - 3.0 / 1.25).abs() < 1e-12);
        assert!((v - 0.2).abs() < 1e-12);
        assert_eq!(gp.lcb(&[0.2], 0.0).unwrap(), m);
    }

    #[test]
    fn cholesky_rebuilds_kernel_matrix() {
        let k = Kernel::matern52(1, 0.2).unwrap();
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let y: Vec<f64> = x.iter().map(|p| p[0].sin()).collect();
        let gp = fit(&x, &y, &k, 1e-6).unwrap();
        let l = gp.chol();
        let rebuilt = l * l.transpose();
        for i in 0..6 {
            for j in 0..6 {
                let direct = k.eval(&x[i], &x[j]) + if i == j { 1e-6 } else { 0.0 };
                assert!((rebuilt[(i, j)] - direct).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn duplicates_trigger_jitter_not_failure() {
        let k = Kernel::matern52(1, 0.2).unwrap();
        let x = vec![vec![0.5], vec![0.5], vec![0.5]];
        let gp = fit(&x, &[1.0, 1.0, 1.0], &k, 1e-15).unwrap();
        assert!(gp.effective_noise() >= 1e-15);
        assert!(gp.posterior_at(&[0.5]).unwrap().1 >= 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Kernel::matern52(1, 0.0).is_err());
        let k = Kernel::matern52(1, 0.2).unwrap();
        assert!(fit(&[vec![0.1]], &[], &k, 1e-6).is_err());
        assert!(fit(&[vec![0.1]], &[1.0], &k, 0.0).is_err());
        assert!(fit(&[vec![0.1, 0.2]], &[1.0], &k, 1e-6).is_err());
    }

    #[test]
    fn lengthscale_search_prefers_smooth_for_smooth_data() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let y: Vec<f64> = x.iter().map(|p| 0.5 * p[0]).collect();
        let gp = fit_best_lengthscale(&x, &y, KernelKind::Matern52, 1.0, 1e-6, &[0.05, 0.2, 1.0])
            .unwrap();
        assert_eq!(gp.kernel().lengthscales[0], 1.0);
    }
}
