//! ARX identification from PRBS-excited plant data.
//!
//! Model convention (`x` is the 3-channel input `[u, t_out, solar]`):
//!
//! ```text
//! y[t] + a_1 y[t-1] + ... + a_na y[t-na] = b_0 x[t-t_d] + ... + b_{nb-1} x[t-t_d-nb+1]
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const N_INPUTS: usize = 3;

/// Input vector `[u, t_out, solar]` at one step.
pub type ArxInput = [f64; N_INPUTS];

#[derive(Debug, thiserror::Error)]
pub enum SysIdError {
    #[error("regressor matrix is rank deficient (|r_ii| = {0:.3e})")]
    RankDeficient(f64),
    #[error("need more than {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("history too short: {0}")]
    HistoryTooShort(String),
    #[error("identified model is unstable (max |root| = {0:.4})")]
    Unstable(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArxJson", into = "ArxJson")]
pub struct ArxModel {
    na: usize,
    nb: usize,
    t_d: usize,
    a: Vec<f64>,
    b: Vec<ArxInput>,
}

/// On-disk layout: `{na, nb, t_d, a, b}` with `b` flattened row-major (nb rows x 3).
#[derive(Serialize, Deserialize)]
struct ArxJson {
    na: usize,
    nb: usize,
    t_d: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl TryFrom<ArxJson> for ArxModel {
    type Error = SysIdError;

    fn try_from(j: ArxJson) -> Result<Self, Self::Error> {
        if j.a.len() != j.na {
            return Err(SysIdError::InvalidModel(format!(
                "a has {} entries, expected na = {}",
                j.a.len(),
                j.na
            )));
        }
        if j.b.len() != j.nb.saturating_mul(N_INPUTS) {
            return Err(SysIdError::InvalidModel(format!(
                "b has {} entries, expected nb*3",
                j.b.len()
            )));
        }
        let b =
            j.b.chunks_exact(N_INPUTS)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
        ArxModel::new(j.a, b, j.t_d)
    }
}

impl From<ArxModel> for ArxJson {
    fn from(m: ArxModel) -> Self {
        ArxJson {
            na: m.na,
            nb: m.nb,
            t_d: m.t_d,
            b: m.b.iter().flatten().copied().collect(),
            a: m.a,
        }
    }
}

impl ArxModel {
    pub fn new(a: Vec<f64>, b: Vec<ArxInput>, t_d: usize) -> Result<Self, SysIdError> {
        if a.is_empty() || b.is_empty() {
            return Err(SysIdError::InvalidModel("need na >= 1 and nb >= 1".into()));
        }
        if a.iter().chain(b.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(SysIdError::InvalidModel(
                "coefficients must be finite".into(),
            ));
        }
        if t_d > 1000 || a.len() > 1000 || b.len() > 1000 {
            return Err(SysIdError::InvalidModel(
                "orders above 1000 are not supported".into(),
            ));
        }
        Ok(Self {
            na: a.len(),
            nb: b.len(),
            t_d,
            a,
            b,
        })
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn nb(&self) -> usize {
        self.nb
    }

    pub fn t_d(&self) -> usize {
        self.t_d
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[ArxInput] {
        &self.b
    }

    /// Time of `inputs[0]` relative to the current step `k` in [`predict`].
    pub fn input_offset(&self) -> isize {
        1 - self.t_d as isize - (self.nb as isize - 1)
    }

    /// Length of the input window needed to predict `horizon` steps.
    pub fn input_window(&self, horizon: usize) -> usize {
        horizon + self.nb - 1
    }

    /// Largest root modulus of `z^na + a_1 z^(na-1) + ... + a_na`.
    pub fn max_pole_modulus(&self) -> f64 {
        let n = self.na;
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for (j, a) in self.a.iter().enumerate() {
            companion[(0, j)] = -a;
        }
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        companion
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn check_stable(&self) -> Result<(), SysIdError> {
        let r = self.max_pole_modulus();
        if r < 1.0 {
            Ok(())
        } else {
            Err(SysIdError::Unstable(r))
        }
    }

    pub fn to_json(&self) -> Result<String, SysIdError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SysIdError> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArxFit {
    pub model: ArxModel,
    /// Root-mean-square one-step prediction error on the training data.
    pub rmse: f64,
}

/// First sample index whose regressors are all available.
fn first_regression_index(na: usize, nb: usize, t_d: usize) -> usize {
    na.max(t_d + nb - 1)
}

/// Least-squares ARX fit minimizing one-step-ahead squared error.
pub fn fit_arx(
    y: &[f64],
    inputs: &[ArxInput],
    na: usize,
    nb: usize,
    t_d: usize,
) -> Result<ArxFit, SysIdError> {
    if na == 0 || nb == 0 {
        return Err(SysIdError::InvalidModel("need na >= 1 and nb >= 1".into()));
    }
    let needed = na + nb + t_d + 10;
    let len = y.len().min(inputs.len());
    if y.len() != inputs.len() || len <= needed {
        return Err(SysIdError::InsufficientData { needed, got: len });
    }
    let t0 = first_regression_index(na, nb, t_d);
    let rows = len - t0;
    let cols = na + N_INPUTS * nb;
    let mut phi = DMatrix::<f64>::zeros(rows, cols);
    let mut target = DVector::<f64>::zeros(rows);
    for (r, t) in (t0..len).enumerate() {
        for i in 0..na {
            phi[(r, i)] = -y[t - 1 - i];
        }
        for j in 0..nb {
            let x = inputs[t - t_d - j];
            for c in 0..N_INPUTS {
                phi[(r, na + j * N_INPUTS + c)] = x[c];
            }
        }
        target[r] = y[t];
    }

    // Equilibrate columns so the rank test is scale free.
    let mut scale = vec![1.0; cols];
    for (c, s) in scale.iter_mut().enumerate() {
        let norm = phi.column(c).norm();
        if norm > 0.0 {
            *s = norm;
            phi.column_mut(c).unscale_mut(norm);
        }
    }
    let qr = phi.clone().qr();
    let r = qr.r();
    let min_diag = (0..cols)
        .map(|i| r[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if !(min_diag > 1e-10) {
        return Err(SysIdError::RankDeficient(min_diag));
    }
    let rhs = qr.q().transpose() * &target;
    let theta = r
        .solve_upper_triangular(&rhs)
        .ok_or(SysIdError::RankDeficient(min_diag))?;
    let residual = &phi * &theta - &target;
    let rmse = (residual.norm_squared() / rows as f64).sqrt();

    let coeff: Vec<f64> = theta.iter().zip(&scale).map(|(t, s)| t / s).collect();
    let a = coeff[..na].to_vec();
    let b = coeff[na..]
        .chunks_exact(N_INPUTS)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(ArxFit {
        model: ArxModel::new(a, b, t_d)?,
        rmse,
    })
}

/// Multi-step simulation feeding predictions back as outputs.
///
/// `y_hist` holds past outputs with the current one (time `k`) last. `inputs[m]` is
/// the input at time `k + model.input_offset() + m`; at least
/// `model.input_window(horizon)` entries are needed. Returns `y[k+1..=k+horizon]`.
pub fn predict(
    model: &ArxModel,
    y_hist: &[f64],
    inputs: &[ArxInput],
    horizon: usize,
) -> Result<Vec<f64>, SysIdError> {
    if y_hist.len() < model.na {
        return Err(SysIdError::HistoryTooShort(format!(
            "need {} outputs, got {}",
            model.na,
            y_hist.len()
        )));
    }
    let window = model.input_window(horizon);
    if inputs.len() < window {
        return Err(SysIdError::HistoryTooShort(format!(
            "need {window} inputs, got {}",
            inputs.len()
        )));
    }
    let mut ys: Vec<f64> = y_hist[y_hist.len() - model.na..].to_vec();
    let mut out = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let mut y = 0.0;
        for (i, a) in model.a.iter().enumerate() {
            y -= a * ys[ys.len() - 1 - i];
        }
        for (j, b) in model.b.iter().enumerate() {
            let x = inputs[h - 1 + model.nb - 1 - j];
            y += b[0] * x[0] + b[1] * x[1] + b[2] * x[2];
        }
        ys.push(y);
        out.push(y);
    }
    Ok(out)
}

/// One-step-ahead RMSE of `model` on a data set.
pub fn one_step_rmse(model: &ArxModel, y: &[f64], inputs: &[ArxInput]) -> Result<f64, SysIdError> {
    let t0 = first_regression_index(model.na, model.nb, model.t_d);
    if y.len() != inputs.len() || y.len() <= t0 {
        return Err(SysIdError::InsufficientData {
            needed: t0 + 1,
            got: y.len(),
        });
    }
    let mut sse = 0.0;
    for t in t0..y.len() {
        let start = (t as isize - 1 + model.input_offset()) as usize;
        let p = predict(model, &y[..t], &inputs[start..], 1)?[0];
        sse += (p - y[t]).powi(2);
    }
    Ok((sse / (y.len() - t0) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrbsConfig {
    pub hold_steps: usize,
    pub u_levels: (f64, f64),
    pub seed: u64,
}

impl Default for PrbsConfig {
    fn default() -> Self {
        Self {
            hold_steps: 4,
            u_levels: (0.0, 0.5),
            seed: 1,
        }
    }
}

/// Maximal-length 15-bit LFSR sequence (taps 15, 14) held for `hold_steps` per bit.
///
/// The sequence is periodic with 32767 bits; the seed picks the starting state.
/// No run of equal bits exceeds 15, so both levels appear once the series spans
/// 16 or more blocks.
pub fn generate_prbs(cfg: &PrbsConfig, n_steps: usize) -> Vec<f64> {
    assert!(cfg.hold_steps >= 1, "hold_steps must be >= 1");
    let (lo, hi) = cfg.u_levels;
    let mut state: u16 = ((cfg.seed % 0x7fff) as u16) + 1;
    let mut out = Vec::with_capacity(n_steps);
    let mut bit = state & 1;
    for i in 0..n_steps {
        if i % cfg.hold_steps == 0 {
            bit = state & 1;
            let feedback = ((state >> 14) ^ (state >> 13)) & 1;
            state = ((state << 1) | feedback) & 0x7fff;
        }
        out.push(if bit == 1 { hi } else { lo });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simulate(model: &ArxModel, inputs: &[ArxInput], y0: f64) -> Vec<f64> {
        let mut y = vec![y0; model.na().max(model.t_d() + model.nb() - 1)];
        let start = y.len();
        for t in start..inputs.len() {
            let mut v = 0.0;
            for (i, a) in model.a().iter().enumerate() {
                v -= a * y[t - 1 - i];
            }
            for (j, b) in model.b().iter().enumerate() {
                let x = inputs[t - model.t_d() - j];
                v += b[0] * x[0] + b[1] * x[1] + b[2] * x[2];
            }
            y.push(v);
        }
        y
    }

    fn random_inputs(n: usize, seed: u64) -> Vec<ArxInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random::<f64>(),
                    rng.random_range(-5.0..10.0),
                    rng.random_range(0.0..300.0),
                ]
            })
            .collect()
    }

    fn truth() -> ArxModel {
        ArxModel::new(
            vec![-1.2, 0.35],
            vec![[0.4, 0.02, 0.001], [0.1, 0.01, 0.0005]],
            1,
        )
        .unwrap()
    }

    #[test]
    fn recovers_noiseless_system() {
        let m = truth();
        let inputs = random_inputs(500, 3);
        let y = simulate(&m, &inputs, 20.0);
        let fit = fit_arx(&y, &inputs, 2, 2, 1).unwrap();
        for (a, b) in fit.model.a().iter().zip(m.a()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in fit.model.b().iter().flatten().zip(m.b().iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(fit.rmse < 1e-8);
        fit.model.check_stable().unwrap();
    }

    #[test]
    fn constant_data_is_rank_deficient() {
        let y = vec![20.0; 100];
        let inputs = vec![[0.5, 3.0, 0.0]; 100];
        assert!(matches!(
            fit_arx(&y, &inputs, 2, 2, 1),
            Err(SysIdError::RankDeficient(_))
        ));
    }

    #[test]
    fn too_little_data() {
        let inputs = random_inputs(14, 1);
        let y = vec![1.0; 14];
        assert!(matches!(
            fit_arx(&y, &inputs, 2, 2, 1),
            Err(SysIdError::InsufficientData { .. })
        ));
    }

    #[test]
    fn integrator_holds_last_output() {
        let m = ArxModel::new(vec![-1.0], vec![[0.3, 0.1, 0.2]], 1).unwrap();
        let inputs = vec![[0.0; 3]; m.input_window(5)];
        let p = predict(&m, &[3.0, 7.5], &inputs, 5).unwrap();
        assert!(p.iter().all(|&v| v == 7.5));
    }

    #[test]
    fn one_step_prediction_matches_hand_expansion() {
        let m = truth();
        // k is the current step; inputs[0] is time k + offset = k - 1 for nb = 2, t_d = 1.
        assert_eq!(m.input_offset(), -1);
        let y_hist = [19.0, 20.0];
        let inputs = [[0.2, 4.0, 100.0], [0.6, 5.0, 150.0]];
        let p = predict(&m, &y_hist, &inputs, 1).unwrap()[0];
        // y[k+1] = 1.2 y[k] - 0.35 y[k-1] + b0 . x[k] + b1 . x[k-1]
        let hand = 1.2 * 20.0 - 0.35 * 19.0
            + (0.4 * 0.6 + 0.02 * 5.0 + 0.001 * 150.0)
            + (0.1 * 0.2 + 0.01 * 4.0 + 0.0005 * 100.0);
        assert!((p - hand).abs() < 1e-12);
    }

    #[test]
    fn predict_rejects_short_history() {
        let m = truth();
        assert!(matches!(
            predict(&m, &[1.0], &[[0.0; 3]; 10], 3),
            Err(SysIdError::HistoryTooShort(_))
        ));
        assert!(matches!(
            predict(&m, &[1.0, 2.0], &[[0.0; 3]; 3], 3),
            Err(SysIdError::HistoryTooShort(_))
        ));
    }

    #[test]
    fn unstable_model_is_flagged() {
        let m = ArxModel::new(vec![-1.5, 0.2], vec![[1.0, 0.0, 0.0]], 1).unwrap();
        assert!(matches!(m.check_stable(), Err(SysIdError::Unstable(_))));
    }

    #[test]
    fn json_layout() {
        let m = truth();
        let s = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["b"].as_array().unwrap().len(), 6);
        assert_eq!(v["b"][1].as_f64().unwrap(), 0.02);
        assert_eq!(ArxModel::from_json(&s).unwrap(), m);
        assert!(ArxModel::from_json(r#"{"na":1,"nb":1,"t_d":0,"a":[0.5],"b":[1.0]}"#).is_err());
    }

    #[test]
    fn prbs_properties() {
        let cfg = PrbsConfig {
            hold_steps: 10,
            u_levels: (0.1, 0.9),
            seed: 5,
        };
        let s = generate_prbs(&cfg, 10);
        assert!(s.iter().all(|&v| v == s[0]));
        let a = generate_prbs(&cfg, 500);
        assert_eq!(a, generate_prbs(&cfg, 500));
        for (i, w) in a.windows(2).enumerate() {
            if w[0] != w[1] {
                assert_eq!((i + 1) % 10, 0);
            }
        }
        assert!(a.contains(&0.1) && a.contains(&0.9));
        let long = generate_prbs(
            &PrbsConfig {
                hold_steps: 1,
                ..cfg
            },
            10_000,
        );
        let frac = long.iter().filter(|&&v| v == 0.9).count() as f64 / 10_000.0;
        assert!((0.35..=0.65).contains(&frac), "{frac}");
    }
}
