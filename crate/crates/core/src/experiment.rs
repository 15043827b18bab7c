//! Experiment description: plant, weather, controller defaults and tuning budget.

use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::billing::BillingMonth;
use crate::building::{BuildingParams, HeatPumpModel};
use crate::comfort::ComfortConditions;
use crate::config_opt::{BetaSchedule, ConfigParams, Domain};
use crate::gp::KernelKind;
use crate::model::{OccupancySchedule, SynthWeather, TimeGrid};
use crate::mpc::{ControllerKind, MpcConfig};
use crate::sysid::PrbsConfig;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("experiment file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

/// The four simulated heating months on a fixed 2023/24 calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatingMonth {
    Nov,
    Dec,
    Jan,
    Feb,
}

impl HeatingMonth {
    pub const ALL: [HeatingMonth; 4] = [
        HeatingMonth::Nov,
        HeatingMonth::Dec,
        HeatingMonth::Jan,
        HeatingMonth::Feb,
    ];

    pub fn billing_month(self) -> BillingMonth {
        let (y, m) = match self {
            HeatingMonth::Nov => (2023, 11),
            HeatingMonth::Dec => (2023, 12),
            HeatingMonth::Jan => (2024, 1),
            HeatingMonth::Feb => (2024, 2),
        };
        BillingMonth::new(y, m).expect("fixed calendar months are valid")
    }

    /// Simulated length. February is always 28 days.
    pub fn sim_days(self) -> u32 {
        match self {
            HeatingMonth::Nov => 30,
            HeatingMonth::Dec | HeatingMonth::Jan => 31,
            HeatingMonth::Feb => 28,
        }
    }

    pub fn start(self) -> NaiveDateTime {
        self.billing_month().start()
    }

    pub fn key(self) -> &'static str {
        match self {
            HeatingMonth::Nov => "nov",
            HeatingMonth::Dec => "dec",
            HeatingMonth::Jan => "jan",
            HeatingMonth::Feb => "feb",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            HeatingMonth::Nov => 0,
            HeatingMonth::Dec => 1,
            HeatingMonth::Jan => 2,
            HeatingMonth::Feb => 3,
        }
    }

    /// Default synthetic weather, loosely following a Belgian winter.
    pub fn default_weather(self) -> SynthWeather {
        let (mean_temp, solar_peak) = match self {
            HeatingMonth::Nov => (7.0, 200.0),
            HeatingMonth::Dec => (4.5, 120.0),
            HeatingMonth::Jan => (3.5, 150.0),
            HeatingMonth::Feb => (4.5, 250.0),
        };
        SynthWeather {
            mean_temp,
            daily_amp: 3.0,
            noise_std: 1.0,
            solar_peak,
        }
    }

    /// Grid of the first `days` days (the whole month when `None`).
    pub fn grid(self, step_seconds: u32, days: Option<u32>) -> Result<TimeGrid, ExperimentError> {
        let d = days.unwrap_or(self.sim_days());
        if d == 0 || d > self.sim_days() {
            return Err(ExperimentError::Invalid(format!(
                "{} has {} simulated days, asked for {d}",
                self.key(),
                self.sim_days()
            )));
        }
        TimeGrid::days(self.start(), step_seconds, d)
            .map_err(|e| ExperimentError::Invalid(e.to_string()))
    }
}

impl FromStr for HeatingMonth {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nov" | "2023-11" => Ok(HeatingMonth::Nov),
            "dec" | "2023-12" => Ok(HeatingMonth::Dec),
            "jan" | "2024-01" => Ok(HeatingMonth::Jan),
            "feb" | "2024-02" => Ok(HeatingMonth::Feb),
            other => Err(ExperimentError::Invalid(format!(
                "'{other}' is not one of nov, dec, jan, feb"
            ))),
        }
    }
}

impl std::fmt::Display for HeatingMonth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeatherSource {
    /// Synthetic weather; `params` replaces the per-month defaults.
    Synth {
        #[serde(default)]
        params: Option<SynthWeather>,
    },
    /// CSV file per month; `{month}` in the path is replaced by the month key.
    File { path: PathBuf },
}

impl Default for WeatherSource {
    fn default() -> Self {
        WeatherSource::Synth { params: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArxOrders {
    pub na: usize,
    pub nb: usize,
    pub t_d: usize,
}

impl Default for ArxOrders {
    fn default() -> Self {
        Self {
            na: 4,
            nb: 4,
            t_d: 1,
        }
    }
}

/// Controller hyperparameters searched by the tuner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub u_low: f64,
    pub u_max: f64,
    pub t_lb_occ: f64,
    pub t_lb_unocc: f64,
}

impl Theta {
    pub const LOWER: [f64; 4] = [0.0, 0.8, 21.0, 15.0];
    pub const UPPER: [f64; 4] = [0.8, 1.0, 23.0, 18.0];

    pub fn domain() -> Domain {
        Domain::new(Self::LOWER.to_vec(), Self::UPPER.to_vec()).expect("static box is valid")
    }

    /// Hand-set values used for the untuned MPC.
    pub fn expert() -> Self {
        Self {
            u_low: 0.0,
            u_max: 1.0,
            t_lb_occ: 21.5,
            t_lb_unocc: 16.0,
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, ExperimentError> {
        if v.len() != 4 {
            return Err(ExperimentError::Invalid(format!(
                "theta needs 4 values, got {}",
                v.len()
            )));
        }
        let t = Self {
            u_low: v[0],
            u_max: v[1],
            t_lb_occ: v[2],
            t_lb_unocc: v[3],
        };
        t.validate()?;
        Ok(t)
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.u_low, self.u_max, self.t_lb_occ, self.t_lb_unocc]
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !Self::domain().contains(&self.to_vec()) {
            return Err(ExperimentError::Invalid(format!(
                "theta {:?} outside the tuning box",
                self.to_vec()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, base: &MpcConfig) -> MpcConfig {
        MpcConfig {
            u_low: self.u_low,
            u_max: self.u_max,
            t_lb_occ: self.t_lb_occ,
            t_lb_unocc: self.t_lb_unocc,
            ..*base
        }
    }
}

/// CONFIG settings apart from the search box and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSettings {
    /// Evaluation budget `K`, initial design included.
    pub max_iters: usize,
    pub n_init: usize,
    pub beta: BetaSchedule,
    pub kernel: KernelKind,
    pub lengthscale: f64,
    pub noise_var: f64,
    pub n_candidates: usize,
    pub n_local: usize,
    pub local_std: f64,
}

impl Default for TuningSettings {
    fn default() -> Self {
        let p = ConfigParams::default();
        Self {
            max_iters: 50,
            n_init: p.n_init,
            beta: p.beta,
            kernel: p.kernel,
            lengthscale: p.lengthscale,
            noise_var: p.noise_var,
            n_candidates: p.n_candidates,
            n_local: p.n_local,
            local_std: p.local_std,
        }
    }
}

impl TuningSettings {
    pub fn params(&self, seed: u64) -> ConfigParams {
        ConfigParams {
            domain: Theta::domain(),
            beta: self.beta,
            max_iters: self.max_iters,
            n_init: self.n_init,
            seed,
            kernel: self.kernel,
            lengthscale: self.lengthscale,
            noise_var: self.noise_var,
            n_candidates: self.n_candidates,
            n_local: self.n_local,
            local_std: self.local_std,
        }
    }
}

/// Everything that defines the simulated plant and its surroundings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub building: BuildingParams,
    pub heat_pump: HeatPumpModel,
    pub schedule: OccupancySchedule,
    pub comfort: ComfortConditions,
    /// Base controller settings; tuned fields are overwritten by `Theta`.
    pub mpc: MpcConfig,
    pub arx: ArxOrders,
    pub prbs: PrbsConfig,
    pub weather: WeatherSource,
    pub weather_seed: u64,
    pub step_seconds: u32,
    /// Simulate only the first `days` days of each month.
    pub days: Option<u32>,
    pub init_temp: f64,
    /// Branch-and-bound node limit per closed-loop MIQP step.
    pub miqp_node_limit: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            building: BuildingParams::default(),
            heat_pump: HeatPumpModel::default(),
            schedule: OccupancySchedule::default(),
            comfort: ComfortConditions::default(),
            mpc: MpcConfig::default(),
            arx: ArxOrders::default(),
            prbs: PrbsConfig::default(),
            weather: WeatherSource::default(),
            weather_seed: 2024,
            step_seconds: TimeGrid::DEFAULT_STEP_SECONDS,
            days: None,
            init_temp: 21.0,
            miqp_node_limit: 30,
        }
    }
}

impl Scenario {
    /// One January week, the quick preset.
    pub fn desk() -> Self {
        Self {
            days: Some(7),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |e: &dyn std::fmt::Display| ExperimentError::Invalid(e.to_string());
        self.building.validate().map_err(|e| bad(&e))?;
        self.heat_pump.validate().map_err(|e| bad(&e))?;
        self.schedule.validate().map_err(|e| bad(&e))?;
        self.comfort.validate().map_err(|e| bad(&e))?;
        self.mpc.validate().map_err(|e| bad(&e))?;
        if self.arx.na == 0 || self.arx.nb == 0 || self.arx.t_d == 0 {
            return Err(ExperimentError::Invalid(
                "ARX orders and delay must be at least 1".into(),
            ));
        }
        if self.prbs.hold_steps == 0 {
            return Err(ExperimentError::Invalid(
                "PRBS hold must be at least one step".into(),
            ));
        }
        if self.step_seconds == 0 || 3600 % self.step_seconds != 0 {
            return Err(ExperimentError::Invalid("step must divide one hour".into()));
        }
        if !(self.init_temp.is_finite()) || self.miqp_node_limit == 0 {
            return Err(ExperimentError::Invalid(
                "init_temp must be finite and the node limit positive".into(),
            ));
        }
        Ok(())
    }
}

/// Top-level experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Extra CONFIG seeds for the contract comparison (the main seed is always used).
    pub extra_seeds: Vec<u64>,
    pub months: Vec<HeatingMonth>,
    /// Contract codes; empty means all known contracts.
    pub contracts: Vec<String>,
    /// Controller for `simulate`.
    pub controller: ControllerKind,
    /// Contract table merged over the built-in one.
    pub contracts_file: Option<PathBuf>,
    pub tuning: TuningSettings,
    pub scenario: Scenario,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extra_seeds: Vec::new(),
            months: vec![HeatingMonth::Jan],
            contracts: Vec::new(),
            controller: ControllerKind::Mask,
            contracts_file: None,
            tuning: TuningSettings::default(),
            scenario: Scenario::default(),
        }
    }
}

impl ExperimentConfig {
    /// January week with `K = 25`.
    pub fn desk() -> Self {
        Self {
            tuning: TuningSettings {
                max_iters: 25,
                ..TuningSettings::default()
            },
            scenario: Scenario::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.months.is_empty() {
            return Err(ExperimentError::Invalid(
                "at least one month is needed".into(),
            ));
        }
        self.scenario.validate()?;
        self.tuning
            .params(self.seed)
            .validate()
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Seeds used by the contract comparison, main seed first, duplicates dropped.
    pub fn seeds(&self) -> Vec<u64> {
        let mut out = vec![self.seed];
        for s in &self.extra_seeds {
            if !out.contains(s) {
                out.push(*s);
            }
        }
        out
    }
}

/// Parses and validates an experiment TOML document.
pub fn parse_experiment_toml(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// One cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub month: HeatingMonth,
    pub contract_code: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub weather_source: WeatherSource,
    pub config_params: ConfigParams,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Datelike, Weekday};

    #[test]
    fn calendar_anchors() {
        assert_eq!(HeatingMonth::Nov.start().weekday(), Weekday::Wed);
        assert_eq!(HeatingMonth::Jan.start().weekday(), Weekday::Mon);
        assert_eq!(HeatingMonth::Feb.sim_days(), 28);
        let g = HeatingMonth::Feb.grid(900, None).unwrap();
        assert_eq!(g.n_steps(), 28 * 96);
        assert!(HeatingMonth::Nov.grid(900, Some(31)).is_err());
        assert_eq!(HeatingMonth::Jan.billing_month().key(), "jan");
    }

    #[test]
    fn theta_box() {
        assert!(Theta::expert().validate().is_ok());
        assert!(Theta::from_slice(&[0.9, 1.0, 22.0, 16.0]).is_err());
        assert!(Theta::from_slice(&[0.1, 1.0, 22.0]).is_err());
        let t = Theta::from_slice(&[0.1, 0.9, 22.0, 16.0]).unwrap();
        let cfg = t.apply(&MpcConfig::default());
        assert_eq!(
            (cfg.u_low, cfg.u_max, cfg.t_lb_occ, cfg.t_lb_unocc),
            (0.1, 0.9, 22.0, 16.0)
        );
        assert_eq!(cfg.horizon, MpcConfig::default().horizon);
    }

    #[test]
    fn parses_minimal_and_full() {
        let c = parse_experiment_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let text = r#"
            seed = 3
            extra_seeds = [4, 3, 5]
            months = ["nov", "feb"]
            contracts = ["ddd", "sns"]
            controller = "qp"

            [tuning]
            max_iters = 12
            beta = { kind = "constant", value = 3.0 }

            [scenario]
            days = 7
            weather = { kind = "file", path = "weather/{month}.csv" }

            [scenario.mpc]
            horizon = 24

            [scenario.building]
            c_air = 2.0
        "#;
        let c = parse_experiment_toml(text).unwrap();
        assert_eq!(c.seeds(), vec![3, 4, 5]);
        assert_eq!(c.months, vec![HeatingMonth::Nov, HeatingMonth::Feb]);
        assert_eq!(c.controller, ControllerKind::Qp);
        assert_eq!(c.tuning.max_iters, 12);
        assert_eq!(c.scenario.mpc.horizon, 24);
        assert_eq!(c.scenario.mpc.s_coeff, MpcConfig::default().s_coeff);
        assert_eq!(c.scenario.building.c_air, 2.0);
        assert!(matches!(c.scenario.weather, WeatherSource::File { .. }));
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(parse_experiment_toml("months = []").is_err());
        assert!(parse_experiment_toml("months = [\"mar\"]").is_err());
        assert!(parse_experiment_toml("bogus = 1").is_err());
        assert!(parse_experiment_toml("[scenario]\nstep_seconds = 7").is_err());
        assert!(parse_experiment_toml("[tuning]\nmax_iters = 0").is_err());
        assert!(parse_experiment_toml("[scenario.mpc]\nu_low = 2.0").is_err());
    }
}
