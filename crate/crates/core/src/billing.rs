//! Monthly electricity bills: energy, 15-minute capacity peak and fixed charge.
//!
//! Money is kept as integer milli-euros. Energy is accumulated per tariff
//! period in integer nano-kWh and prices in micro-euros per kWh, so a bill does
//! not depend on the order in which steps are summed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::model::{is_weekend, SimTrace, TimeGrid};

const EMBEDDED_CONTRACTS: &str = include_str!("../data/contracts.toml");
const PEAK_WINDOW_SECONDS: u32 = 900;
const MONTH_KEYS: [&str; 12] = [
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];
/// Month whose prices are stored as the base tariff of a dynamic contract.
pub const DYNAMIC_BASE_MONTH: u32 = 11;

#[derive(Debug, thiserror::Error)]
pub enum BillingError {
    #[error("grid step of {0} s does not divide the 15-minute peak window")]
    GridMismatch(u32),
    #[error("trace step at {0} lies outside the billed month {1}")]
    SpanMismatch(NaiveDateTime, BillingMonth),
    #[error("contract {code} has no price for {month}")]
    MissingMonthPrice { code: String, month: BillingMonth },
    #[error("duplicate contract code {0}")]
    DuplicateCode(String),
    #[error("contract schema error: {0}")]
    SchemaError(String),
    #[error("unknown contract {0}")]
    UnknownContract(String),
    #[error("invalid month {0}")]
    InvalidMonth(String),
    #[error("power series length {got} does not match grid of {expected} steps")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Amount in milli-euros.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct Money(pub i64);

impl Money {
    pub fn from_euros(eur: f64) -> Self {
        Money((eur * 1000.0).round() as i64)
    }

    pub fn milli(self) -> i64 {
        self.0
    }

    pub fn euros(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", a / 1000, a % 1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BillingMonth {
    pub year: i32,
    pub month: u32,
}

impl BillingMonth {
    pub fn new(year: i32, month: u32) -> Result<Self, BillingError> {
        if !(1..=12).contains(&month) {
            return Err(BillingError::InvalidMonth(format!("{year}-{month}")));
        }
        Ok(Self { year, month })
    }

    /// Parses `YYYY-MM`.
    pub fn parse(s: &str) -> Result<Self, BillingError> {
        let bad = || BillingError::InvalidMonth(s.to_string());
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        Self::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }

    pub fn of(ts: NaiveDateTime) -> Self {
        Self {
            year: ts.year(),
            month: ts.month(),
        }
    }

    pub fn first_day(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("validated month")
    }

    pub fn start(&self) -> NaiveDateTime {
        self.first_day().and_hms_opt(0, 0, 0).expect("midnight")
    }

    pub fn next(&self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    pub fn days(&self) -> u32 {
        (self.next().first_day() - self.first_day()).num_days() as u32
    }

    pub fn contains(&self, ts: NaiveDateTime) -> bool {
        ts.year() == self.year && ts.month() == self.month
    }

    /// Three-letter lowercase key used in contract files.
    pub fn key(&self) -> &'static str {
        MONTH_KEYS[self.month as usize - 1]
    }
}

impl fmt::Display for BillingMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl Serialize for BillingMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BillingMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BillingMonth::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Period {
    Day,
    Night,
}

/// Day is 07:00 up to (excluding) 22:00 on weekdays; everything else is night.
pub fn classify_period(ts: NaiveDateTime) -> Period {
    if !is_weekend(ts) && (7..22).contains(&ts.hour()) {
        Period::Day
    } else {
        Period::Night
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tariff {
    Single(f64),
    DayNight { day: f64, night: f64 },
}

impl Tariff {
    pub fn price(&self, period: Period) -> f64 {
        match (*self, period) {
            (Tariff::Single(p), _) => p,
            (Tariff::DayNight { day, .. }, Period::Day) => day,
            (Tariff::DayNight { night, .. }, Period::Night) => night,
        }
    }

    fn validate(&self, code: &str) -> Result<(), BillingError> {
        let ok = |p: f64| p.is_finite() && p >= 0.0;
        let valid = match *self {
            Tariff::Single(p) => ok(p),
            Tariff::DayNight { day, night } => ok(day) && ok(night),
        };
        if valid {
            Ok(())
        } else {
            Err(BillingError::SchemaError(format!(
                "{code}: prices must be finite and non-negative"
            )))
        }
    }

    fn same_shape(&self, other: &Tariff) -> bool {
        matches!(
            (self, other),
            (Tariff::Single(_), Tariff::Single(_))
                | (Tariff::DayNight { .. }, Tariff::DayNight { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    pub code: String,
    /// Base prices; for dynamic contracts these apply to November only.
    pub tariff: Tariff,
    /// EUR per kW of monthly 15-minute peak.
    pub capacity_tariff: f64,
    /// EUR per month.
    pub fixed_charge: f64,
    pub dynamic: bool,
    /// Month number (1..=12) to tariff override.
    pub monthly: BTreeMap<u32, Tariff>,
}

impl Contract {
    pub fn single_price(&self) -> Option<f64> {
        match self.tariff {
            Tariff::Single(p) => Some(p),
            _ => None,
        }
    }

    pub fn day_night_prices(&self) -> Option<(f64, f64)> {
        match self.tariff {
            Tariff::DayNight { day, night } => Some((day, night)),
            _ => None,
        }
    }

    /// Tariff in force during `month`.
    pub fn tariff_for(&self, month: BillingMonth) -> Result<Tariff, BillingError> {
        if let Some(t) = self.monthly.get(&month.month) {
            return Ok(*t);
        }
        if !self.dynamic || month.month == DYNAMIC_BASE_MONTH {
            return Ok(self.tariff);
        }
        Err(BillingError::MissingMonthPrice {
            code: self.code.clone(),
            month,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContractFile {
    #[serde(default)]
    contract: Vec<RawContract>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContract {
    code: String,
    single_price: Option<f64>,
    day_price: Option<f64>,
    night_price: Option<f64>,
    #[serde(default)]
    capacity_tariff: f64,
    fixed_charge: f64,
    dynamic: Option<bool>,
    #[serde(default)]
    monthly: BTreeMap<String, Tariff>,
}

impl TryFrom<RawContract> for Contract {
    type Error = BillingError;

    fn try_from(r: RawContract) -> Result<Self, BillingError> {
        let schema = |m: String| Err(BillingError::SchemaError(m));
        if r.code.trim().is_empty() {
            return schema("empty contract code".into());
        }
        let tariff = match (r.single_price, r.day_price, r.night_price) {
            (Some(p), None, None) => Tariff::Single(p),
            (None, Some(day), Some(night)) => Tariff::DayNight { day, night },
            _ => {
                return schema(format!(
                    "{}: give either single_price or both day_price and night_price",
                    r.code
                ))
            }
        };
        tariff.validate(&r.code)?;
        for v in [r.capacity_tariff, r.fixed_charge] {
            if !v.is_finite() || v < 0.0 {
                return schema(format!(
                    "{}: charges must be finite and non-negative",
                    r.code
                ));
            }
        }
        let mut monthly = BTreeMap::new();
        for (key, t) in r.monthly {
            let m = MONTH_KEYS
                .iter()
                .position(|k| *k == key.to_ascii_lowercase())
                .ok_or_else(|| {
                    BillingError::SchemaError(format!("{}: unknown month key {key}", r.code))
                })?;
            t.validate(&r.code)?;
            if !t.same_shape(&tariff) {
                return schema(format!(
                    "{}: monthly price for {key} has a different structure",
                    r.code
                ));
            }
            monthly.insert(m as u32 + 1, t);
        }
        let dynamic = r.dynamic.unwrap_or_else(|| r.code.starts_with('d'));
        Ok(Contract {
            code: r.code,
            tariff,
            capacity_tariff: r.capacity_tariff,
            fixed_charge: r.fixed_charge,
            dynamic,
            monthly,
        })
    }
}

/// Parses a contract TOML document. Codes must be unique within the document.
pub fn parse_contracts_toml(text: &str) -> Result<Vec<Contract>, BillingError> {
    let file: ContractFile =
        toml::from_str(text).map_err(|e| BillingError::SchemaError(e.to_string()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.contract.len());
    for raw in file.contract {
        if !seen.insert(raw.code.clone()) {
            return Err(BillingError::DuplicateCode(raw.code));
        }
        out.push(Contract::try_from(raw)?);
    }
    Ok(out)
}

pub fn embedded_contracts() -> Vec<Contract> {
    parse_contracts_toml(EMBEDDED_CONTRACTS).expect("embedded contract table is valid")
}

/// Embedded contracts with entries from `text` replacing same-code defaults and
/// new codes appended.
pub fn merge_contracts(text: &str) -> Result<Vec<Contract>, BillingError> {
    let mut base = embedded_contracts();
    for c in parse_contracts_toml(text)? {
        match base.iter_mut().find(|b| b.code == c.code) {
            Some(slot) => *slot = c,
            None => base.push(c),
        }
    }
    Ok(base)
}

pub fn load_contracts(path: &Path) -> Result<Vec<Contract>, BillingError> {
    merge_contracts(&std::fs::read_to_string(path)?)
}

pub fn find_contract<'a>(
    contracts: &'a [Contract],
    code: &str,
) -> Result<&'a Contract, BillingError> {
    contracts
        .iter()
        .find(|c| c.code == code)
        .ok_or_else(|| BillingError::UnknownContract(code.to_string()))
}

/// Highest mean power over calendar-aligned, non-overlapping 15-minute windows.
/// Windows cut by the ends of the series average only the steps present.
pub fn peak_power_15min(p_elec: &[f64], grid: &TimeGrid) -> Result<f64, BillingError> {
    let step = grid.step_seconds();
    if step == 0 || step > PEAK_WINDOW_SECONDS || !PEAK_WINDOW_SECONDS.is_multiple_of(step) {
        return Err(BillingError::GridMismatch(step));
    }
    if p_elec.len() != grid.n_steps() {
        return Err(BillingError::LengthMismatch {
            expected: grid.n_steps(),
            got: p_elec.len(),
        });
    }
    let mut peak: f64 = 0.0;
    let mut current: Option<i64> = None;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, p) in p_elec.iter().enumerate() {
        let w = grid
            .timestamp(i)
            .and_utc()
            .timestamp()
            .div_euclid(PEAK_WINDOW_SECONDS as i64);
        if current != Some(w) {
            if count > 0 {
                peak = peak.max(sum / count as f64);
            }
            current = Some(w);
            sum = 0.0;
            count = 0;
        }
        sum += p;
        count += 1;
    }
    if count > 0 {
        peak = peak.max(sum / count as f64);
    }
    Ok(peak)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillBreakdown {
    pub energy_cost: Money,
    pub capacity_cost: Money,
    pub fixed_cost: Money,
    pub total: Money,
    pub peak_kw: f64,
    pub day_kwh: f64,
    pub night_kwh: f64,
}

fn nano_kwh(kw: f64, hours: f64) -> i128 {
    (kw * hours * 1e9).round() as i128
}

fn micro_eur(price: f64) -> i128 {
    (price * 1e6).round() as i128
}

/// Rounds `num / den` half away from zero.
fn div_round(num: i128, den: i128) -> i64 {
    let q = (num.abs() + den / 2) / den;
    (if num < 0 { -q } else { q }) as i64
}

/// Bill for a power series (kW per step) on `grid`. Every step must fall inside
/// `month`; a series covering only part of the month is billed as is, with
/// the full fixed charge and the capacity charge on the observed peak.
pub fn compute_bill_series(
    p_elec: &[f64],
    grid: &TimeGrid,
    contract: &Contract,
    month: BillingMonth,
) -> Result<BillBreakdown, BillingError> {
    if p_elec.len() != grid.n_steps() {
        return Err(BillingError::LengthMismatch {
            expected: grid.n_steps(),
            got: p_elec.len(),
        });
    }
    for ts in [grid.start(), grid.last()] {
        if !month.contains(ts) {
            return Err(BillingError::SpanMismatch(ts, month));
        }
    }
    let tariff = contract.tariff_for(month)?;
    let peak_kw = peak_power_15min(p_elec, grid)?;
    let hours = grid.step_hours();
    let (mut day, mut night) = (0i128, 0i128);
    for (i, p) in p_elec.iter().enumerate() {
        match classify_period(grid.timestamp(i)) {
            Period::Day => day += nano_kwh(*p, hours),
            Period::Night => night += nano_kwh(*p, hours),
        }
    }
    // nano-kWh × micro-EUR/kWh = 1e-15 EUR; milli-EUR needs a further 1e12
    let energy_num =
        day * micro_eur(tariff.price(Period::Day)) + night * micro_eur(tariff.price(Period::Night));
    let energy_cost = Money(div_round(energy_num, 1_000_000_000_000));
    let capacity_cost =
        Money((micro_eur(contract.capacity_tariff) as f64 * peak_kw / 1000.0).round() as i64);
    let fixed_cost = Money(div_round(micro_eur(contract.fixed_charge), 1000));
    Ok(BillBreakdown {
        energy_cost,
        capacity_cost,
        fixed_cost,
        total: energy_cost + capacity_cost + fixed_cost,
        peak_kw,
        day_kwh: day as f64 * 1e-9,
        night_kwh: night as f64 * 1e-9,
    })
}

pub fn compute_bill(
    trace: &SimTrace,
    contract: &Contract,
    month: BillingMonth,
) -> Result<BillBreakdown, BillingError> {
    compute_bill_series(&trace.p_elec, &trace.grid, contract, month)
}

/// One row of the bill report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillRow {
    pub contract: String,
    pub month: BillingMonth,
    pub energy_eur: String,
    pub capacity_eur: String,
    pub fixed_eur: String,
    pub total_eur: String,
    pub peak_kw: f64,
}

impl BillRow {
    pub fn new(contract: &str, month: BillingMonth, bill: &BillBreakdown) -> Self {
        Self {
            contract: contract.to_string(),
            month,
            energy_eur: bill.energy_cost.to_string(),
            capacity_eur: bill.capacity_cost.to_string(),
            fixed_eur: bill.fixed_cost.to_string(),
            total_eur: bill.total.to_string(),
            peak_kw: bill.peak_kw,
        }
    }
}
