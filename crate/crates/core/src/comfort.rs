//! Fanger PMV (ISO 7730) and the percentile comfort constraint.

use serde::{Deserialize, Serialize};

use crate::model::SimTrace;

/// Percentile of |PMV| over occupied steps that must stay below [`PMV_LIMIT`].
pub const COMFORT_PERCENTILE: f64 = 0.8;
pub const PMV_LIMIT: f64 = 0.5;

const MAX_ITER: usize = 200;
const FIXED_POINT_TOL: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ComfortError {
    #[error("clothing temperature iteration did not converge")]
    NoConvergence,
    #[error("trace has no occupied steps")]
    NoOccupiedSteps,
    #[error("invalid comfort conditions: {0}")]
    InvalidConditions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComfortConditions {
    pub t_air: f64,
    pub t_radiant: f64,
    /// Percent.
    pub rel_humidity: f64,
    /// m/s.
    pub air_speed: f64,
    pub met: f64,
    pub clo: f64,
}

impl Default for ComfortConditions {
    fn default() -> Self {
        Self {
            t_air: 22.0,
            t_radiant: 22.0,
            rel_humidity: 50.0,
            air_speed: 0.1,
            met: 1.2,
            clo: 1.0,
        }
    }
}

impl ComfortConditions {
    /// Same environment with air and radiant temperature set to `t`.
    pub fn at_temperature(&self, t: f64) -> Self {
        Self {
            t_air: t,
            t_radiant: t,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), ComfortError> {
        let bad = |m: &str| Err(ComfortError::InvalidConditions(m.into()));
        if !(0.0..=100.0).contains(&self.rel_humidity) {
            return bad("relative humidity outside [0, 100]");
        }
        if !(self.air_speed >= 0.0) {
            return bad("negative air speed");
        }
        if !(self.met > 0.0) || !(self.clo >= 0.0) {
            return bad("met must be positive and clo non-negative");
        }
        if !(0.0..=40.0).contains(&self.t_air) || !self.t_radiant.is_finite() {
            return bad("air temperature outside [0, 40]");
        }
        Ok(())
    }
}

/// Predicted mean vote. External work is taken as zero.
pub fn pmv(c: &ComfortConditions) -> Result<f64, ComfortError> {
    c.validate()?;
    let ta = c.t_air;
    let tr = c.t_radiant;
    // water vapour partial pressure, Pa
    let pa = c.rel_humidity * 10.0 * (16.6536 - 4030.183 / (ta + 235.0)).exp();
    let icl = 0.155 * c.clo;
    let m = c.met * 58.15;
    let mw = m;
    let f_cl = if icl <= 0.078 {
        1.0 + 1.29 * icl
    } else {
        1.05 + 0.645 * icl
    };
    let hcf = 12.1 * c.air_speed.sqrt();
    let taa = ta + 273.0;
    let tra = tr + 273.0;

    let t_cla = taa + (35.5 - ta) / (3.5 * icl + 0.1);
    let p1 = icl * f_cl;
    let p2 = p1 * 3.96;
    let p3 = p1 * 100.0;
    let p4 = p1 * taa;
    let p5 = 308.7 - 0.028 * mw + p2 * (tra / 100.0).powi(4);
    let mut xn = t_cla / 100.0;
    let mut xf = t_cla / 50.0;
    let mut hc = hcf;
    let mut n = 0;
    while (xn - xf).abs() > FIXED_POINT_TOL {
        xf = (xf + xn) / 2.0;
        let hcn = 2.38 * (100.0 * xf - taa).abs().powf(0.25);
        hc = hcf.max(hcn);
        xn = (p5 + p4 * hc - p2 * xf.powi(4)) / (100.0 + p3 * hc);
        n += 1;
        if n > MAX_ITER || !xn.is_finite() {
            return Err(ComfortError::NoConvergence);
        }
    }
    let tcl = 100.0 * xn - 273.0;

    let hl1 = 3.05e-3 * (5733.0 - 6.99 * mw - pa);
    let hl2 = if mw > 58.15 { 0.42 * (mw - 58.15) } else { 0.0 };
    let hl3 = 1.7e-5 * m * (5867.0 - pa);
    let hl4 = 0.0014 * m * (34.0 - ta);
    let hl5 = 3.96 * f_cl * (xn.powi(4) - (tra / 100.0).powi(4));
    let hl6 = f_cl * hc * (tcl - ta);
    let ts = 0.303 * (-0.036 * m).exp() + 0.028;
    Ok(ts * (mw - hl1 - hl2 - hl3 - hl4 - hl5 - hl6))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortStats {
    pub pmv_series: Vec<f64>,
    pub pmv_cdf_80: f64,
    pub g_value: f64,
}

/// Percentile `q ∈ [0, 1]` with linear interpolation between closest ranks
/// (`h = (n - 1) q`). Returns `None` for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// PMV over the occupied steps of `trace` (indoor air used as radiant temperature)
/// and the resulting comfort constraint value.
pub fn pmv_cdf_80(
    trace: &SimTrace,
    template: &ComfortConditions,
) -> Result<ComfortStats, ComfortError> {
    let pmv_series = trace
        .t_in
        .iter()
        .zip(&trace.occupied)
        .filter(|(_, occ)| **occ)
        .map(|(t, _)| pmv(&template.at_temperature(*t)))
        .collect::<Result<Vec<_>, _>>()?;
    let abs: Vec<f64> = pmv_series.iter().map(|v| v.abs()).collect();
    let p80 = percentile(&abs, COMFORT_PERCENTILE).ok_or(ComfortError::NoOccupiedSteps)?;
    Ok(ComfortStats {
        pmv_series,
        pmv_cdf_80: p80,
        g_value: p80 - PMV_LIMIT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_point() {
        let v = pmv(&ComfortConditions::default()).unwrap();
        assert!((v - 0.097027).abs() < 0.01, "{v}");
    }

    #[test]
    fn warmer_is_higher() {
        let c = ComfortConditions::default();
        assert!(pmv(&c.at_temperature(26.0)).unwrap() > pmv(&c.at_temperature(20.0)).unwrap());
    }

    #[test]
    fn deterministic() {
        let c = ComfortConditions::default().at_temperature(19.3);
        assert_eq!(pmv(&c).unwrap().to_bits(), pmv(&c).unwrap().to_bits());
    }

    #[test]
    fn rejects_out_of_range() {
        let c = ComfortConditions {
            rel_humidity: 120.0,
            ..Default::default()
        };
        assert!(matches!(pmv(&c), Err(ComfortError::InvalidConditions(_))));
        assert!(pmv(&ComfortConditions::default().at_temperature(45.0)).is_err());
    }

    #[test]
    fn percentile_hand_values() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!((percentile(&v, 0.8).unwrap() - 0.82).abs() < 1e-12);
        assert_eq!(percentile(&[0.3; 7], 0.8), Some(0.3));
        assert_eq!(percentile(&[], 0.8), None);
        assert_eq!(percentile(&[2.0], 0.8), Some(2.0));
    }
}
