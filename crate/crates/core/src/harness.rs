//! Experiment runner: ARX identification per month, the closed-loop black box
//! `θ ↦ (bill, comfort)`, per-contract tuning, contract comparison and baselines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::billing::{compute_bill, find_contract, BillBreakdown, Contract, Money};
use crate::building::{run_closed_loop, PlantState, StepContext};
use crate::comfort::{pmv_cdf_80, ComfortStats};
use crate::config_opt::{
    resume_config, write_eval_record, ConfigParams, EvalRecord, Evaluation, TuningResult,
};
use crate::error::{Error, Result};
use crate::experiment::{HeatingMonth, Scenario, Theta, TuningSettings, WeatherSource};
use crate::model::{load_weather, synth_weather, SimTrace, WeatherSeries};
use crate::mpc::{mpc_policy, ControllerKind, MpcConfig, StepLog};
use crate::sysid::{fit_arx, generate_prbs, ArxInput, ArxModel, PrbsConfig};

/// Identified model and weather of one heating month.
#[derive(Debug, Clone)]
pub struct MonthData {
    pub month: HeatingMonth,
    /// Weather over the whole simulated month.
    pub weather: WeatherSeries,
    pub model: ArxModel,
    /// One-step RMSE on the identification data; `None` when loaded from cache.
    pub fit_rmse: Option<f64>,
}

/// One closed-loop run with its bill and comfort statistics.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub controller: ControllerKind,
    pub config: MpcConfig,
    pub trace: SimTrace,
    pub bill: BillBreakdown,
    pub comfort: ComfortStats,
    pub step_logs: Vec<StepLog>,
}

impl RunOutcome {
    /// Bill total in euros.
    pub fn j(&self) -> f64 {
        self.bill.total.euros()
    }

    pub fn g(&self) -> f64 {
        self.comfort.g_value
    }

    pub fn mean_solve_ms(&self) -> f64 {
        if self.step_logs.is_empty() {
            return 0.0;
        }
        self.step_logs.iter().map(|l| l.solve_ms).sum::<f64>() / self.step_logs.len() as f64
    }

    fn evaluation(&self) -> Evaluation {
        Evaluation {
            j: self.j(),
            g: self.g(),
            info: Some(serde_json::json!({
                "bill": self.bill,
                "pmv_cdf_80": self.comfort.pmv_cdf_80,
            })),
        }
    }
}

/// 64-bit FNV-1a, used for stable cache keys.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Holds the scenario, the contract table and the per-month identification cache.
pub struct Lab {
    scenario: Scenario,
    contracts: Vec<Contract>,
    cache_dir: Option<PathBuf>,
    months: Mutex<BTreeMap<HeatingMonth, Arc<MonthData>>>,
}

impl Lab {
    pub fn new(scenario: Scenario, contracts: Vec<Contract>) -> Result<Self> {
        scenario.validate()?;
        if contracts.is_empty() {
            return Err(Error::Precondition("contract table is empty".into()));
        }
        Ok(Self {
            scenario,
            contracts,
            cache_dir: None,
            months: Mutex::new(BTreeMap::new()),
        })
    }

    /// Identified models are stored in and loaded from `dir`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn contracts(&self) -> &[Contract] {
        &self.contracts
    }

    pub fn contract(&self, code: &str) -> Result<&Contract> {
        Ok(find_contract(&self.contracts, code)?)
    }

    /// Weather over the whole month.
    pub fn month_weather(&self, month: HeatingMonth) -> Result<WeatherSeries> {
        let grid = month.grid(self.scenario.step_seconds, None)?;
        match &self.scenario.weather {
            WeatherSource::Synth { params } => {
                let p = params.unwrap_or(month.default_weather());
                let seed = self
                    .scenario
                    .weather_seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(month.index());
                Ok(synth_weather(&p, seed, grid)?)
            }
            WeatherSource::File { path } => {
                let path = PathBuf::from(path.to_string_lossy().replace("{month}", month.key()));
                Ok(load_weather(&path, grid)?)
            }
        }
    }

    fn prbs_for(&self, month: HeatingMonth) -> PrbsConfig {
        PrbsConfig {
            seed: self
                .scenario
                .prbs
                .seed
                .wrapping_add(7919 * (month.index() + 1)),
            ..self.scenario.prbs
        }
    }

    fn cache_key(&self, month: HeatingMonth) -> Result<String> {
        let s = &self.scenario;
        let key = serde_json::to_string(&(
            month,
            &s.building,
            &s.heat_pump,
            &s.schedule,
            &s.arx,
            &s.prbs,
            &s.weather,
            s.weather_seed,
            s.step_seconds,
            s.init_temp,
        ))?;
        Ok(format!(
            "arx-{}-{:016x}.json",
            month.key(),
            fnv1a(key.as_bytes())
        ))
    }

    /// Runs the PRBS experiment on the month's weather and fits the ARX model.
    pub fn identify(&self, month: HeatingMonth) -> Result<MonthData> {
        let s = &self.scenario;
        let weather = self.month_weather(month)?;
        let n = weather.grid().n_steps();
        let u = generate_prbs(&self.prbs_for(month), n);
        let mut excite = |ctx: &StepContext<'_>| u[ctx.step];
        let trace = run_closed_loop(
            &s.building,
            &s.heat_pump,
            &mut excite,
            &weather,
            &s.schedule,
            PlantState::uniform(s.init_temp),
        )?;
        let x: Vec<ArxInput> = (0..n)
            .map(|i| [trace.u[i], weather.t_out()[i], weather.solar()[i]])
            .collect();
        let fit = fit_arx(&trace.t_in, &x, s.arx.na, s.arx.nb, s.arx.t_d)?;
        fit.model.check_stable()?;
        log::info!("identified {month}: rmse {:.4} K", fit.rmse);
        Ok(MonthData {
            month,
            weather,
            model: fit.model,
            fit_rmse: Some(fit.rmse),
        })
    }

    /// Month data, identified on first use (or read from the cache directory).
    pub fn month(&self, month: HeatingMonth) -> Result<Arc<MonthData>> {
        let mut map = self.months.lock().expect("identification cache poisoned");
        if let Some(d) = map.get(&month) {
            return Ok(d.clone());
        }
        let data = match &self.cache_dir {
            Some(dir) => {
                let path = dir.join(self.cache_key(month)?);
                if path.exists() {
                    let model = ArxModel::from_json(&std::fs::read_to_string(&path)?)?;
                    MonthData {
                        month,
                        weather: self.month_weather(month)?,
                        model,
                        fit_rmse: None,
                    }
                } else {
                    let d = self.identify(month)?;
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(&path, d.model.to_json()?)?;
                    d
                }
            }
            None => self.identify(month)?,
        };
        let data = Arc::new(data);
        map.insert(month, data.clone());
        Ok(data)
    }

    /// Weather for the simulated span of `month`.
    fn sim_weather(&self, data: &MonthData) -> Result<WeatherSeries> {
        let grid = data
            .month
            .grid(self.scenario.step_seconds, self.scenario.days)?;
        let n = grid.n_steps();
        Ok(WeatherSeries::new(
            grid,
            data.weather.t_out()[..n].to_vec(),
            data.weather.solar()[..n].to_vec(),
        )?)
    }

    /// Closed-loop run of one controller on one month, billed under `contract_code`.
    pub fn simulate(
        &self,
        controller: ControllerKind,
        cfg: &MpcConfig,
        month: HeatingMonth,
        contract_code: &str,
    ) -> Result<RunOutcome> {
        let s = &self.scenario;
        let contract = self.contract(contract_code)?;
        let data = self.month(month)?;
        let weather = self.sim_weather(&data)?;
        let mut policy = mpc_policy(
            controller,
            &data.model,
            cfg,
            &s.heat_pump,
            contract,
            s.miqp_node_limit,
        )?;
        let trace = run_closed_loop(
            &s.building,
            &s.heat_pump,
            &mut policy,
            &weather,
            &s.schedule,
            PlantState::uniform(s.init_temp),
        )?;
        let bill = compute_bill(&trace, contract, month.billing_month())?;
        let comfort = pmv_cdf_80(&trace, &s.comfort)?;
        Ok(RunOutcome {
            controller,
            config: *cfg,
            trace,
            bill,
            comfort,
            step_logs: policy.take_logs(),
        })
    }

    /// Mask MPC with `theta` applied: bill total and comfort constraint value.
    pub fn evaluate_theta(
        &self,
        theta: &Theta,
        month: HeatingMonth,
        contract_code: &str,
    ) -> Result<RunOutcome> {
        theta.validate()?;
        let cfg = theta.apply(&self.scenario.mpc);
        self.simulate(ControllerKind::Mask, &cfg, month, contract_code)
    }

    /// CONFIG over the θ box for one contract and month. Every evaluation is
    /// appended to `log` as JSONL when given.
    pub fn tune_contract(
        &self,
        contract_code: &str,
        month: HeatingMonth,
        params: &ConfigParams,
        log: Option<&Path>,
    ) -> Result<TuningResult> {
        self.contract(contract_code)?;
        if params.domain != Theta::domain() {
            return Err(Error::Precondition(
                "tuning domain must be the θ box".into(),
            ));
        }
        self.month(month)?;
        let mut writer = match log {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        let blackbox = |t: &[f64]| -> Result<Evaluation> {
            let theta = Theta::from_slice(t)?;
            Ok(self
                .evaluate_theta(&theta, month, contract_code)?
                .evaluation())
        };
        let observe = |rec: &EvalRecord| {
            if let Some(w) = writer.as_mut() {
                write_eval_record(&mut *w, rec)?;
                w.flush()?;
            }
            Ok(())
        };
        let result = resume_config(blackbox, params, Vec::new(), observe)?;
        Ok(result)
    }

    /// Tunes every (contract, month, seed) cell and builds one report per seed.
    /// Cells that fail are listed in the report instead of aborting the others.
    pub fn compare_contracts_seeds(
        &self,
        months: &[HeatingMonth],
        codes: &[String],
        settings: &TuningSettings,
        seeds: &[u64],
        log_dir: Option<&Path>,
    ) -> Result<Vec<ContractReport>> {
        if months.is_empty() || codes.is_empty() || seeds.is_empty() {
            return Err(Error::Precondition(
                "need at least one month, contract and seed".into(),
            ));
        }
        for c in codes {
            self.contract(c)?;
        }
        for m in months {
            self.month(*m)?;
        }
        let mut keys = Vec::new();
        for &seed in seeds {
            for &month in months {
                for code in codes {
                    keys.push((seed, month, code.clone()));
                }
            }
        }
        let cells: Vec<ContractCell> = keys
            .par_iter()
            .map(|(seed, month, code)| {
                let log =
                    log_dir.map(|d| d.join(format!("tuning/seed{seed}/{code}-{month}.jsonl")));
                let params = settings.params(*seed);
                let outcome = self.tune_contract(code, *month, &params, log.as_deref());
                ContractCell::from_outcome(code, *month, *seed, outcome)
            })
            .collect();
        Ok(seeds
            .iter()
            .map(|s| {
                let mine: Vec<ContractCell> =
                    cells.iter().filter(|c| c.seed == *s).cloned().collect();
                ContractReport::build(*s, months, codes, mine)
            })
            .collect())
    }

    pub fn compare_contracts(
        &self,
        months: &[HeatingMonth],
        codes: &[String],
        settings: &TuningSettings,
        seed: u64,
    ) -> Result<ContractReport> {
        let mut r = self.compare_contracts_seeds(months, codes, settings, &[seed], None)?;
        Ok(r.remove(0))
    }

    /// Rule-based baseline, untuned QP MPC (expert θ) and MIQP MPC on one month.
    pub fn run_baselines(
        &self,
        month: HeatingMonth,
        contract_code: &str,
    ) -> Result<Vec<RunOutcome>> {
        let expert = Theta::expert().apply(&self.scenario.mpc);
        let miqp_cfg = MpcConfig {
            u_max: 1.0,
            u_low: 0.0,
            ..expert
        };
        Ok(vec![
            self.simulate(ControllerKind::Baseline, &expert, month, contract_code)?,
            self.simulate(ControllerKind::Qp, &expert, month, contract_code)?,
            self.simulate(ControllerKind::Miqp, &miqp_cfg, month, contract_code)?,
        ])
    }
}

/// Result of tuning one contract for one month and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractCell {
    pub contract: String,
    pub month: HeatingMonth,
    pub seed: u64,
    /// Bill at the best feasible θ; `None` if none was found or the cell failed.
    pub bill: Option<BillBreakdown>,
    pub best_theta: Option<Vec<f64>>,
    pub g: Option<f64>,
    pub evaluations: usize,
    pub infeasibility_declared: bool,
    pub error: Option<String>,
}

impl ContractCell {
    pub fn total(&self) -> Option<Money> {
        self.bill.as_ref().map(|b| b.total)
    }

    fn from_outcome(
        code: &str,
        month: HeatingMonth,
        seed: u64,
        outcome: Result<TuningResult>,
    ) -> Self {
        let mut cell = ContractCell {
            contract: code.to_string(),
            month,
            seed,
            bill: None,
            best_theta: None,
            g: None,
            evaluations: 0,
            infeasibility_declared: false,
            error: None,
        };
        match outcome {
            Ok(r) => {
                cell.evaluations = r.history.len();
                cell.infeasibility_declared = r.infeasibility_declared;
                if let Some(best) = &r.best_feasible {
                    cell.bill = best
                        .info
                        .as_ref()
                        .and_then(|i| i.get("bill"))
                        .and_then(|b| serde_json::from_value(b.clone()).ok());
                    cell.best_theta = Some(best.theta.clone());
                    cell.g = Some(best.g);
                }
            }
            Err(e) => {
                log::error!("cell {code}/{month}/seed {seed} failed: {e}");
                cell.error = Some(e.to_string());
            }
        }
        cell
    }
}

/// Saving potential and ratio over the contracts with a bill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingSummary {
    pub best: String,
    pub worst: String,
    pub best_bill: Money,
    pub worst_bill: Money,
    /// `worst - best`.
    pub saving_potential: Money,
    /// `saving_potential / worst`.
    pub saving_ratio: f64,
}

impl SavingSummary {
    /// Ties go to the contract listed first.
    pub fn from_bills(bills: &[(String, Money)]) -> Option<Self> {
        let mut best: Option<&(String, Money)> = None;
        let mut worst: Option<&(String, Money)> = None;
        for b in bills {
            if best.is_none_or(|x| b.1 < x.1) {
                best = Some(b);
            }
            if worst.is_none_or(|x| b.1 > x.1) {
                worst = Some(b);
            }
        }
        let (best, worst) = (best?, worst?);
        let sp = Money(worst.1.milli() - best.1.milli());
        let sr = if worst.1.milli() > 0 {
            sp.milli() as f64 / worst.1.milli() as f64
        } else {
            0.0
        };
        Some(Self {
            best: best.0.clone(),
            worst: worst.0.clone(),
            best_bill: best.1,
            worst_bill: worst.1,
            saving_potential: sp,
            saving_ratio: sr,
        })
    }
}

/// Optimal bills of every contract per month, with saving rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    pub seed: u64,
    pub months: Vec<HeatingMonth>,
    pub contracts: Vec<String>,
    pub cells: Vec<ContractCell>,
    pub per_month: Vec<(HeatingMonth, Option<SavingSummary>)>,
    /// Sum over months, for contracts with a bill in every month.
    pub totals: Vec<(String, Money)>,
    pub overall: Option<SavingSummary>,
    pub best_contract: Option<String>,
    /// `contract/month` keys of cells without a bill.
    pub failed: Vec<String>,
}

impl ContractReport {
    pub fn build(
        seed: u64,
        months: &[HeatingMonth],
        codes: &[String],
        cells: Vec<ContractCell>,
    ) -> Self {
        let cell = |code: &str, m: HeatingMonth| {
            cells
                .iter()
                .find(|c| c.contract == code && c.month == m)
                .map(ContractCell::total)
        };
        let per_month = months
            .iter()
            .map(|&m| {
                let bills: Vec<(String, Money)> = codes
                    .iter()
                    .filter_map(|c| cell(c, m).flatten().map(|b| (c.clone(), b)))
                    .collect();
                (m, SavingSummary::from_bills(&bills))
            })
            .collect();
        let totals: Vec<(String, Money)> = codes
            .iter()
            .filter_map(|c| {
                let bills: Option<Vec<Money>> =
                    months.iter().map(|&m| cell(c, m).flatten()).collect();
                bills.map(|b| (c.clone(), b.into_iter().sum()))
            })
            .collect();
        let overall = SavingSummary::from_bills(&totals);
        let failed = codes
            .iter()
            .flat_map(|c| months.iter().map(move |m| (c, *m)))
            .filter(|(c, m)| cell(c, *m).flatten().is_none())
            .map(|(c, m)| format!("{c}/{m}"))
            .collect();
        Self {
            seed,
            months: months.to_vec(),
            contracts: codes.to_vec(),
            best_contract: overall.as_ref().map(|o| o.best.clone()),
            per_month,
            totals,
            overall,
            failed,
            cells,
        }
    }

    pub fn cell(&self, code: &str, month: HeatingMonth) -> Option<&ContractCell> {
        self.cells
            .iter()
            .find(|c| c.contract == code && c.month == month)
    }

    pub fn bill(&self, code: &str, month: HeatingMonth) -> Option<Money> {
        self.cell(code, month).and_then(ContractCell::total)
    }
}
