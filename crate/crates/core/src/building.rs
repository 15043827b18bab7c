//! Two-state RC building model heated by a modulating heat pump.
//!
//! This is the "true plant" of every closed-loop experiment. It is deliberately
//! richer than the ARX model the controllers use: it has an unmeasured mass
//! node and occupancy-driven internal gains that the ARX inputs do not carry.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::model::{occupancy_at, OccupancySchedule, SimTrace, WeatherSeries};

/// Temperatures outside this band mean the integration has gone wrong.
pub const STATE_BOUNDS: (f64, f64) = (-20.0, 60.0);

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("modulation {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("state left [{lo}, {hi}] (t_in = {t_in}, t_mass = {t_mass})", lo = STATE_BOUNDS.0, hi = STATE_BOUNDS.1)]
    NumericalBlowup { t_in: f64, t_mass: f64 },
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildingParams {
    /// Zone air capacitance [kWh/K].
    pub c_air: f64,
    /// Envelope and floor mass capacitance [kWh/K].
    pub c_mass: f64,
    /// Zone to outdoor resistance [K/kW].
    pub r_out: f64,
    /// Zone to mass resistance [K/kW].
    pub r_mass: f64,
    /// Effective solar aperture [m²].
    pub solar_gain: f64,
    /// Internal gains while occupied [kW].
    pub q_internal_occupied: f64,
}

impl Default for BuildingParams {
    fn default() -> Self {
        Self {
            c_air: 3.0,
            c_mass: 12.0,
            r_out: 8.0,
            r_mass: 2.0,
            solar_gain: 2.5,
            q_internal_occupied: 0.4,
        }
    }
}

impl BuildingParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [self.c_air, self.c_mass, self.r_out, self.r_mass];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SimError::InvalidParams(
                "capacitances and resistances must be > 0".into(),
            ));
        }
        if !(self.solar_gain >= 0.0 && self.q_internal_occupied >= 0.0) {
            return Err(SimError::InvalidParams(
                "solar gain and internal gains must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Continuous-time state matrix of `(t_in, t_mass)`, per hour.
    pub fn state_matrix(&self) -> [[f64; 2]; 2] {
        let g_out = 1.0 / self.r_out;
        let g_mass = 1.0 / self.r_mass;
        [
            [-(g_out + g_mass) / self.c_air, g_mass / self.c_air],
            [g_mass / self.c_mass, -g_mass / self.c_mass],
        ]
    }

    /// Spectral radius of the explicit-Euler transition matrix for a step of `dt_hours`.
    pub fn euler_spectral_radius(&self, dt_hours: f64) -> f64 {
        let a = self.state_matrix();
        let m = [
            [1.0 + dt_hours * a[0][0], dt_hours * a[0][1]],
            [dt_hours * a[1][0], 1.0 + dt_hours * a[1][1]],
        ];
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = tr * tr / 4.0 - det;
        if disc >= 0.0 {
            let s = disc.sqrt();
            (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
        } else {
            det.abs().sqrt()
        }
    }

    pub fn check_stable(&self, dt_hours: f64) -> Result<(), SimError> {
        let rho = self.euler_spectral_radius(dt_hours);
        if rho < 1.0 {
            Ok(())
        } else {
            Err(SimError::InvalidParams(format!(
                "explicit Euler at {dt_hours} h is unstable (spectral radius {rho:.4})"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatPumpModel {
    /// Nominal heating capacity [kW].
    pub q_nominal: f64,
    /// Electric power per unit modulation [kW].
    pub phi: f64,
    /// Start-up electric power drawn whenever the pump runs [kW].
    pub gamma: f64,
    pub cop: f64,
}

impl Default for HeatPumpModel {
    fn default() -> Self {
        Self {
            q_nominal: 15.0,
            phi: 4.0,
            gamma: 1.0,
            cop: 3.0,
        }
    }
}

impl HeatPumpModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.q_nominal > 0.0 && self.phi > 0.0 && self.gamma >= 0.0 && self.cop > 0.0) {
            return Err(SimError::InvalidParams(
                "heat pump needs q_nominal, phi, cop > 0 and gamma >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Useful heat delivered to the zone [kW]. The start-up overhead delivers none.
    pub fn heat_output(&self, u: f64) -> f64 {
        (self.cop * self.phi * u).min(self.q_nominal * u)
    }
}

/// Electric power drawn at modulation `u`: zero when off, `phi * u + gamma` otherwise.
pub fn electric_power(hp: &HeatPumpModel, u: f64) -> Result<f64, SimError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(SimError::Domain(u));
    }
    Ok(if u == 0.0 { 0.0 } else { hp.phi * u + hp.gamma })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub t_in: f64,
    pub t_mass: f64,
}

impl PlantState {
    pub fn uniform(t: f64) -> Self {
        Self { t_in: t, t_mass: t }
    }
}

/// One explicit-Euler step of `dt_seconds`.
#[allow(clippy::too_many_arguments)]
pub fn step(
    params: &BuildingParams,
    hp: &HeatPumpModel,
    state: PlantState,
    u: f64,
    weather_t: (f64, f64),
    occupied: bool,
    dt_seconds: f64,
) -> Result<PlantState, SimError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(SimError::Domain(u));
    }
    if !(dt_seconds > 0.0) {
        return Err(SimError::InvalidParams(format!(
            "dt = {dt_seconds} s must be positive"
        )));
    }
    let (t_out, solar) = weather_t;
    let dt = dt_seconds / 3600.0;
    let gains = hp.heat_output(u)
        + params.solar_gain * solar / 1000.0
        + if occupied {
            params.q_internal_occupied
        } else {
            0.0
        };
    let q_out = (t_out - state.t_in) / params.r_out;
    let q_mass = (state.t_mass - state.t_in) / params.r_mass;
    let next = PlantState {
        t_in: state.t_in + dt * (q_out + q_mass + gains) / params.c_air,
        t_mass: state.t_mass - dt * q_mass / params.c_mass,
    };
    let ok = |t: f64| t.is_finite() && t >= STATE_BOUNDS.0 && t <= STATE_BOUNDS.1;
    if !(ok(next.t_in) && ok(next.t_mass)) {
        return Err(SimError::NumericalBlowup {
            t_in: next.t_in,
            t_mass: next.t_mass,
        });
    }
    Ok(next)
}

/// What a controller sees at one control step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub timestamp: NaiveDateTime,
    pub state: PlantState,
    pub weather: &'a WeatherSeries,
    pub schedule: &'a OccupancySchedule,
}

/// Closed-loop control law. One instance drives one run and may keep history.
pub trait ControlPolicy {
    fn control(
        &mut self,
        ctx: &StepContext<'_>,
    ) -> Result<f64, Box<dyn std::error::Error + Send + Sync>>;
}

impl<F> ControlPolicy for F
where
    F: FnMut(&StepContext<'_>) -> f64,
{
    fn control(
        &mut self,
        ctx: &StepContext<'_>,
    ) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
        Ok(self(ctx))
    }
}

/// Simulates the plant under `controller` over the weather grid.
pub fn run_closed_loop<P: ControlPolicy + ?Sized>(
    params: &BuildingParams,
    hp: &HeatPumpModel,
    controller: &mut P,
    weather: &WeatherSeries,
    schedule: &OccupancySchedule,
    init: PlantState,
) -> Result<SimTrace, SimError> {
    params.validate()?;
    hp.validate()?;
    let grid = *weather.grid();
    let dt = grid.step_seconds() as f64;
    params.check_stable(grid.step_hours())?;

    let n = grid.n_steps();
    let (mut t_in, mut u_series, mut p_elec, mut occupied) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut state = init;
    for k in 0..n {
        let ts = grid.timestamp(k);
        let occ = occupancy_at(schedule, ts);
        let ctx = StepContext {
            step: k,
            timestamp: ts,
            state,
            weather,
            schedule,
        };
        let u = controller
            .control(&ctx)
            .map_err(|source| SimError::AtStep { step: k, source })?;
        let p = electric_power(hp, u).map_err(|e| SimError::AtStep {
            step: k,
            source: Box::new(e),
        })?;
        t_in.push(state.t_in);
        u_series.push(u);
        p_elec.push(p);
        occupied.push(occ);
        state = step(
            params,
            hp,
            state,
            u,
            (weather.t_out()[k], weather.solar()[k]),
            occ,
            dt,
        )
        .map_err(|e| SimError::AtStep {
            step: k,
            source: Box::new(e),
        })?;
    }
    Ok(SimTrace {
        grid,
        t_in,
        u: u_series,
        p_elec,
        occupied,
        weather: weather.clone(),
    })
}
