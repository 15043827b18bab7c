use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hvac_tune::billing::{embedded_contracts, load_contracts};
use hvac_tune::config_opt::{best_feasible, read_eval_log, TuningResult};
use hvac_tune::experiment::{parse_experiment_toml, ExperimentConfig, HeatingMonth, Theta};
use hvac_tune::harness::{ContractReport, Lab};
use hvac_tune::mpc::ControllerKind;
use hvac_tune::report::{emit_report, NamedRun, NamedTuning, ReportInputs};

#[derive(Parser)]
#[command(
    name = "hvac-tune",
    version,
    about = "Closed-loop MPC tuning and electricity contract comparison"
)]
struct Cli {
    /// Experiment TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// One-week January scenario with a 25-evaluation budget.
    #[arg(long, global = true)]
    desk: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Cell {
    /// Month key (nov, dec, jan, feb); defaults to the first configured month.
    #[arg(long)]
    month: Option<HeatingMonth>,
    /// Contract code; defaults to the first configured contract.
    #[arg(long)]
    contract: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Identify and cache the ARX model of every configured month.
    Identify,
    /// Run one controller over one month.
    Simulate {
        #[command(flatten)]
        cell: Cell,
        /// Baseline, qp, miqp or mask; defaults to the configured controller.
        #[arg(long)]
        controller: Option<ControllerKind>,
        /// u_low,u_max,t_lb_occ,t_lb_unocc; expert values when omitted.
        #[arg(long, value_delimiter = ',')]
        theta: Option<Vec<f64>>,
    },
    /// Tune the Mask MPC for one contract and month.
    Tune {
        #[command(flatten)]
        cell: Cell,
    },
    /// Tune every configured contract and month and compare the optimal bills.
    Compare,
    /// Rule-based, QP and MIQP controllers with expert settings.
    Baselines {
        #[command(flatten)]
        cell: Cell,
    },
    /// Rebuild the report from comparison JSON and tuning logs under `--from`.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_experiment_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None if cli.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    if cli.config.is_some() && cli.desk {
        cfg.scenario.days = ExperimentConfig::desk().scenario.days;
        cfg.tuning.max_iters = ExperimentConfig::desk().tuning.max_iters;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn contract_codes(cfg: &ExperimentConfig, lab: &Lab) -> Vec<String> {
    if cfg.contracts.is_empty() {
        lab.contracts().iter().map(|c| c.code.clone()).collect()
    } else {
        cfg.contracts.clone()
    }
}

fn pick(cfg: &ExperimentConfig, lab: &Lab, cell: &Cell) -> (HeatingMonth, String) {
    let month = cell.month.unwrap_or(cfg.months[0]);
    let code = cell
        .contract
        .clone()
        .unwrap_or_else(|| contract_codes(cfg, lab)[0].clone());
    (month, code)
}

fn print_written(out: &Path, files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", out.join(f).display());
    }
}

fn read_reports(dir: &Path) -> Result<(Vec<ContractReport>, Vec<NamedTuning>)> {
    let mut reports = Vec::new();
    let compare = dir.join("compare");
    if compare.is_dir() {
        let mut seeds: Vec<PathBuf> = fs::read_dir(&compare)?
            .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
            .filter(|p| p.is_file())
            .collect();
        seeds.sort();
        for p in seeds {
            let text = fs::read_to_string(&p)?;
            let r: ContractReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            reports.push(r);
        }
        reports.sort_by_key(|r| r.seed);
    }
    let mut tunings = Vec::new();
    let tuning = dir.join("tuning");
    if tuning.is_dir() {
        let mut logs = Vec::new();
        collect_jsonl(&tuning, &mut logs)?;
        logs.sort();
        for p in logs {
            let history = read_eval_log(BufReader::new(fs::File::open(&p)?))
                .with_context(|| format!("parsing {}", p.display()))?;
            let label = p
                .strip_prefix(&tuning)?
                .with_extension("")
                .to_string_lossy()
                .replace(std::path::MAIN_SEPARATOR, "-");
            let best = best_feasible(&history);
            tunings.push(NamedTuning {
                label,
                result: TuningResult {
                    history,
                    best_feasible: best,
                    infeasibility_declared: false,
                },
            });
        }
    }
    Ok((reports, tunings))
}

fn collect_jsonl(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_jsonl(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "jsonl") {
            out.push(p);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let contracts = match &cfg.contracts_file {
        Some(p) => load_contracts(p).with_context(|| format!("loading {}", p.display()))?,
        None => embedded_contracts(),
    };
    let out = &cli.out;
    let lab = Lab::new(cfg.scenario.clone(), contracts)?.with_cache_dir(out.join("cache"));

    match &cli.cmd {
        Cmd::Identify => {
            let dir = out.join("arx");
            fs::create_dir_all(&dir)?;
            for &m in &cfg.months {
                let data = lab.month(m)?;
                let path = dir.join(format!("{m}.json"));
                fs::write(&path, data.model.to_json()?)?;
                match data.fit_rmse {
                    Some(r) => println!(
                        "{m}: rmse {r:.4} °C, max pole {:.4}",
                        data.model.max_pole_modulus()
                    ),
                    None => println!(
                        "{m}: loaded from cache, max pole {:.4}",
                        data.model.max_pole_modulus()
                    ),
                }
                println!("wrote {}", path.display());
            }
        }
        Cmd::Simulate {
            cell,
            controller,
            theta,
        } => {
            let (month, code) = pick(&cfg, &lab, cell);
            let kind = controller.unwrap_or(cfg.controller);
            let theta = match theta {
                Some(v) => Theta::from_slice(v)?,
                None => Theta::expert(),
            };
            theta.validate()?;
            let outcome = lab.simulate(kind, &theta.apply(&cfg.scenario.mpc), month, &code)?;
            println!(
                "{} {code} {month}: bill {} EUR, g {:.3}",
                kind.name(),
                outcome.bill.total,
                outcome.g()
            );
            let label = format!("{}-{code}-{month}", kind.name());
            let runs = vec![NamedRun {
                label,
                contract: code,
                month,
                outcome,
            }];
            print_written(
                out,
                &emit_report(
                    &ReportInputs {
                        runs,
                        ..Default::default()
                    },
                    out,
                )?,
            );
        }
        Cmd::Tune { cell } => {
            let (month, code) = pick(&cfg, &lab, cell);
            let params = cfg.tuning.params(cfg.seed);
            let result = lab.tune_contract(&code, month, &params, None)?;
            match &result.best_feasible {
                Some(b) => println!(
                    "{code} {month}: best bill {:.3} EUR at θ = {:?}",
                    b.j_eur, b.theta
                ),
                None if result.infeasibility_declared => {
                    println!("{code} {month}: declared infeasible")
                }
                None => println!("{code} {month}: no feasible θ found"),
            }
            let label = format!("seed{}-{code}-{month}", cfg.seed);
            let tunings = vec![NamedTuning { label, result }];
            print_written(
                out,
                &emit_report(
                    &ReportInputs {
                        tunings,
                        ..Default::default()
                    },
                    out,
                )?,
            );
        }
        Cmd::Compare => {
            let codes = contract_codes(&cfg, &lab);
            let reports = lab.compare_contracts_seeds(
                &cfg.months,
                &codes,
                &cfg.tuning,
                &cfg.seeds(),
                Some(out),
            )?;
            for r in &reports {
                match &r.overall {
                    Some(o) => println!(
                        "seed {}: best {} ({} EUR), worst {} ({} EUR), SR {:.2}%",
                        r.seed,
                        o.best,
                        o.best_bill,
                        o.worst,
                        o.worst_bill,
                        100.0 * o.saving_ratio
                    ),
                    None => println!("seed {}: no complete contract", r.seed),
                }
                if !r.failed.is_empty() {
                    println!("seed {}: failed cells {}", r.seed, r.failed.join(", "));
                }
            }
            let failed = reports.iter().any(|r| !r.failed.is_empty());
            print_written(
                out,
                &emit_report(
                    &ReportInputs {
                        comparisons: reports,
                        ..Default::default()
                    },
                    out,
                )?,
            );
            if failed {
                bail!("some cells failed; see the report");
            }
        }
        Cmd::Baselines { cell } => {
            let (month, code) = pick(&cfg, &lab, cell);
            let runs: Vec<NamedRun> = lab
                .run_baselines(month, &code)?
                .into_iter()
                .map(|outcome| {
                    println!(
                        "{}: bill {} EUR, g {:.3}, {:.2} ms/step",
                        outcome.controller.name(),
                        outcome.bill.total,
                        outcome.g(),
                        outcome.mean_solve_ms()
                    );
                    NamedRun {
                        label: format!("{}-{code}-{month}", outcome.controller.name()),
                        contract: code.clone(),
                        month,
                        outcome,
                    }
                })
                .collect();
            print_written(
                out,
                &emit_report(
                    &ReportInputs {
                        runs,
                        ..Default::default()
                    },
                    out,
                )?,
            );
        }
        Cmd::Report { from } => {
            let (comparisons, tunings) = read_reports(from)?;
            let inputs = ReportInputs {
                comparisons,
                tunings,
                ..Default::default()
            };
            if inputs.is_empty() {
                bail!("nothing to report under {}", from.display());
            }
            print_written(out, &emit_report(&inputs, out)?);
        }
    }
    Ok(())
}
