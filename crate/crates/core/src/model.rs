//! Time grids, weather, occupancy and the closed-loop trace type.
//!
//! Everything here is immutable after construction. Series are plain `Vec<f64>`
//! aligned to a [`TimeGrid`]; index `i` of every series refers to the interval
//! starting at `grid.timestamp(i)`.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Timestamp format used by every CSV this crate reads or writes.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const T_OUT_RANGE: (f64, f64) = (-40.0, 50.0);

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("missing column `{0}` in weather file")]
    MissingColumn(String),
    #[error("weather data does not cover the grid: {0}")]
    CoverageGap(String),
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("invalid weather series: {0}")]
    InvalidWeather(String),
    #[error("invalid occupancy schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    start: NaiveDateTime,
    step_seconds: u32,
    n_steps: usize,
}

impl TimeGrid {
    pub const DEFAULT_STEP_SECONDS: u32 = 900;

    pub fn new(
        start: NaiveDateTime,
        step_seconds: u32,
        n_steps: usize,
    ) -> Result<Self, ModelError> {
        if step_seconds == 0 || 3600 % step_seconds != 0 {
            return Err(ModelError::InvalidGrid(format!(
                "step of {step_seconds} s must be positive and divide 3600"
            )));
        }
        if n_steps == 0 {
            return Err(ModelError::InvalidGrid(
                "grid needs at least one step".into(),
            ));
        }
        Ok(Self {
            start,
            step_seconds,
            n_steps,
        })
    }

    /// Grid covering `days` whole days from `start` at `step_seconds`.
    pub fn days(start: NaiveDateTime, step_seconds: u32, days: u32) -> Result<Self, ModelError> {
        if step_seconds == 0 {
            return Err(ModelError::InvalidGrid("step must be positive".into()));
        }
        let n = (days as usize * 86_400) / step_seconds as usize;
        Self::new(start, step_seconds, n)
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn step_seconds(&self) -> u32 {
        self.step_seconds
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step_hours(&self) -> f64 {
        self.step_seconds as f64 / 3600.0
    }

    /// Timestamp of step `i`. Indices past the end extrapolate the grid.
    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::seconds(i as i64 * self.step_seconds as i64)
    }

    /// Timestamp of the last grid point (not the end of the last interval).
    pub fn last(&self) -> NaiveDateTime {
        self.timestamp(self.n_steps - 1)
    }

    /// End of the last interval.
    pub fn end(&self) -> NaiveDateTime {
        self.timestamp(self.n_steps)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.n_steps).map(|i| self.timestamp(i))
    }
}

/// Outdoor temperature and global solar irradiance on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    grid: TimeGrid,
    t_out: Vec<f64>,
    solar: Vec<f64>,
}

impl WeatherSeries {
    pub fn new(grid: TimeGrid, t_out: Vec<f64>, solar: Vec<f64>) -> Result<Self, ModelError> {
        if t_out.len() != grid.n_steps() || solar.len() != grid.n_steps() {
            return Err(ModelError::InvalidWeather(format!(
                "series lengths {}/{} do not match grid of {} steps",
                t_out.len(),
                solar.len(),
                grid.n_steps()
            )));
        }
        if let Some(bad) = solar.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(ModelError::InvalidWeather(format!(
                "solar irradiance {bad} is not >= 0"
            )));
        }
        if let Some(bad) = t_out
            .iter()
            .find(|t| !(t.is_finite() && **t >= T_OUT_RANGE.0 && **t <= T_OUT_RANGE.1))
        {
            return Err(ModelError::InvalidWeather(format!(
                "outdoor temperature {bad} outside [{}, {}]",
                T_OUT_RANGE.0, T_OUT_RANGE.1
            )));
        }
        Ok(Self { grid, t_out, solar })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn t_out(&self) -> &[f64] {
        &self.t_out
    }

    pub fn solar(&self) -> &[f64] {
        &self.solar
    }

    /// `(t_out, solar)` at step `i`, holding the first/last sample outside the grid.
    pub fn at_clamped(&self, i: isize) -> (f64, f64) {
        let last = self.grid.n_steps() as isize - 1;
        let j = i.clamp(0, last) as usize;
        (self.t_out[j], self.solar[j])
    }

    /// Writes the series as weather CSV (`timestamp,t_out_c,solar_wm2`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["timestamp", "t_out_c", "solar_wm2"])?;
        for (i, ts) in self.grid.timestamps().enumerate() {
            w.write_record([
                ts.format(TIMESTAMP_FORMAT).to_string(),
                format!("{}", self.t_out[i]),
                format!("{}", self.solar[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One raw row of a weather file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherSample {
    pub timestamp: NaiveDateTime,
    pub t_out: f64,
    pub solar: f64,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    let s = s.strip_suffix('Z').unwrap_or(s);
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

/// Parses weather CSV rows. Rows must be strictly increasing in time.
pub fn parse_weather_csv<R: Read>(reader: R) -> Result<Vec<WeatherSample>, ModelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ModelError::MissingColumn(name.to_string()))
    };
    let (ts_col, t_col, s_col) = (col("timestamp")?, col("t_out_c")?, col("solar_wm2")?);

    let mut out: Vec<WeatherSample> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| ModelError::ParseError {
            line,
            msg: e.to_string(),
        })?;
        let field = |c: usize| {
            record.get(c).ok_or_else(|| ModelError::ParseError {
                line,
                msg: format!("missing field {c}"),
            })
        };
        let timestamp = parse_timestamp(field(ts_col)?).ok_or_else(|| ModelError::ParseError {
            line,
            msg: "bad timestamp".into(),
        })?;
        let num = |c: usize| -> Result<f64, ModelError> {
            let v: f64 = field(c)?.parse().map_err(|e: std::num::ParseFloatError| {
                ModelError::ParseError {
                    line,
                    msg: e.to_string(),
                }
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ModelError::ParseError {
                    line,
                    msg: "non-finite value".into(),
                })
            }
        };
        let sample = WeatherSample {
            timestamp,
            t_out: num(t_col)?,
            solar: num(s_col)?,
        };
        if let Some(prev) = out.last() {
            if sample.timestamp <= prev.timestamp {
                return Err(ModelError::ParseError {
                    line,
                    msg: "timestamps must strictly increase".into(),
                });
            }
        }
        out.push(sample);
    }
    Ok(out)
}

/// Linearly resamples raw weather rows onto `grid`.
pub fn resample_weather(
    samples: &[WeatherSample],
    grid: TimeGrid,
) -> Result<WeatherSeries, ModelError> {
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(ModelError::CoverageGap("file has no data rows".into())),
    };
    if first.timestamp > grid.start() || last.timestamp < grid.last() {
        return Err(ModelError::CoverageGap(format!(
            "data spans {} .. {}, grid needs {} .. {}",
            first.timestamp,
            last.timestamp,
            grid.start(),
            grid.last()
        )));
    }
    let mut t_out = Vec::with_capacity(grid.n_steps());
    let mut solar = Vec::with_capacity(grid.n_steps());
    let mut j = 0;
    for ts in grid.timestamps() {
        while j + 1 < samples.len() && samples[j + 1].timestamp <= ts {
            j += 1;
        }
        let a = samples[j];
        if a.timestamp == ts || j + 1 == samples.len() {
            t_out.push(a.t_out);
            solar.push(a.solar);
            continue;
        }
        let b = samples[j + 1];
        let span = (b.timestamp - a.timestamp).num_milliseconds() as f64;
        let w = (ts - a.timestamp).num_milliseconds() as f64 / span;
        t_out.push(a.t_out + w * (b.t_out - a.t_out));
        solar.push(a.solar + w * (b.solar - a.solar));
    }
    WeatherSeries::new(grid, t_out, solar)
}

/// Loads a weather CSV and aligns it to `grid` by linear interpolation in time.
pub fn load_weather(path: &Path, grid: TimeGrid) -> Result<WeatherSeries, ModelError> {
    let file = std::fs::File::open(path)?;
    let samples = parse_weather_csv(std::io::BufReader::new(file))?;
    resample_weather(&samples, grid)
}

/// Parameters of the synthetic winter weather generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthWeather {
    pub mean_temp: f64,
    pub daily_amp: f64,
    pub noise_std: f64,
    pub solar_peak: f64,
}

/// Sinusoidal daily temperature cycle plus Gaussian noise; solar is a half-sine
/// between 08:00 and 17:00.
pub fn synth_weather(
    params: &SynthWeather,
    seed: u64,
    grid: TimeGrid,
) -> Result<WeatherSeries, ModelError> {
    if !(params.daily_amp >= 0.0 && params.noise_std >= 0.0 && params.solar_peak >= 0.0) {
        return Err(ModelError::InvalidWeather(
            "daily_amp, noise_std and solar_peak must be non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_std)
        .map_err(|e| ModelError::InvalidWeather(e.to_string()))?;
    let mut t_out = Vec::with_capacity(grid.n_steps());
    let mut solar = Vec::with_capacity(grid.n_steps());
    for ts in grid.timestamps() {
        let hour = clock_hours(ts);
        let phase = 2.0 * std::f64::consts::PI * hour / 24.0 - std::f64::consts::FRAC_PI_2;
        let eps = if params.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        t_out.push(params.mean_temp + params.daily_amp * phase.sin() + eps);
        let s = if (8.0..=17.0).contains(&hour) {
            params.solar_peak * (std::f64::consts::PI * (hour - 8.0) / 9.0).sin()
        } else {
            0.0
        };
        solar.push(s.max(0.0));
    }
    WeatherSeries::new(grid, t_out, solar)
}

/// Fractional clock hour of a timestamp, e.g. 06:30 -> 6.5.
pub fn clock_hours(ts: NaiveDateTime) -> f64 {
    ts.hour() as f64 + ts.minute() as f64 / 60.0 + ts.second() as f64 / 3600.0
}

pub fn is_weekend(ts: NaiveDateTime) -> bool {
    matches!(ts.weekday(), Weekday::Sat | Weekday::Sun)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancySchedule {
    pub weekday_occupied_before: f64,
    pub weekday_occupied_after: f64,
    pub weekend_occupied: bool,
}

impl Default for OccupancySchedule {
    fn default() -> Self {
        Self {
            weekday_occupied_before: 7.0,
            weekday_occupied_after: 20.0,
            weekend_occupied: true,
        }
    }
}

impl OccupancySchedule {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (b, a) = (self.weekday_occupied_before, self.weekday_occupied_after);
        if !(0.0..=24.0).contains(&b) || !(0.0..=24.0).contains(&a) || b >= a {
            return Err(ModelError::InvalidSchedule(format!(
                "need 0 <= before ({b}) < after ({a}) <= 24"
            )));
        }
        Ok(())
    }

    pub fn occupancy(&self, grid: &TimeGrid) -> Vec<bool> {
        grid.timestamps().map(|ts| occupancy_at(self, ts)).collect()
    }
}

pub fn occupancy_at(schedule: &OccupancySchedule, ts: NaiveDateTime) -> bool {
    if is_weekend(ts) {
        return schedule.weekend_occupied;
    }
    let h = clock_hours(ts);
    h < schedule.weekday_occupied_before || h >= schedule.weekday_occupied_after
}

/// Record of one closed-loop simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub grid: TimeGrid,
    pub t_in: Vec<f64>,
    pub u: Vec<f64>,
    pub p_elec: Vec<f64>,
    pub occupied: Vec<bool>,
    pub weather: WeatherSeries,
}

impl SimTrace {
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.grid.n_steps();
        if [
            self.t_in.len(),
            self.u.len(),
            self.p_elec.len(),
            self.occupied.len(),
        ]
        .iter()
        .any(|&l| l != n)
            || self.weather.grid().n_steps() != n
        {
            return Err(ModelError::InvalidTrace(
                "series lengths differ from grid".into(),
            ));
        }
        for i in 0..n {
            let (u, p) = (self.u[i], self.p_elec[i]);
            if !(0.0..=1.0).contains(&u) {
                return Err(ModelError::InvalidTrace(format!(
                    "u[{i}] = {u} outside [0, 1]"
                )));
            }
            if !(p >= 0.0) || ((u == 0.0) != (p == 0.0)) {
                return Err(ModelError::InvalidTrace(format!(
                    "p_elec[{i}] = {p} inconsistent with u = {u}"
                )));
            }
        }
        Ok(())
    }

    pub fn energy_kwh(&self) -> f64 {
        self.p_elec.iter().sum::<f64>() * self.grid.step_hours()
    }

    /// Writes `timestamp,t_in_c,u,p_elec_kw,t_out_c,solar_wm2,occupied`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record([
            "timestamp",
            "t_in_c",
            "u",
            "p_elec_kw",
            "t_out_c",
            "solar_wm2",
            "occupied",
        ])?;
        for (i, ts) in self.grid.timestamps().enumerate() {
            w.write_record([
                ts.format(TIMESTAMP_FORMAT).to_string(),
                format!("{:.6}", self.t_in[i]),
                format!("{:.6}", self.u[i]),
                format!("{:.6}", self.p_elec[i]),
                format!("{:.6}", self.weather.t_out()[i]),
                format!("{:.6}", self.weather.solar()[i]),
                (self.occupied[i] as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
