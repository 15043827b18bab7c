//! Report files: bill CSVs, the contract comparison table, PMV CDF curves and
//! JSONL copies of tuning logs. Output depends only on the results passed in,
//! so emitting the same results twice gives identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::billing::{BillRow, Money};
use crate::config_opt::{EvalRecord, TuningResult};
use crate::error::{Error, Result};
use crate::experiment::HeatingMonth;
use crate::harness::{ContractReport, RunOutcome};
use crate::mpc::ControllerKind;

/// A closed-loop run to report, filed under `label`.
#[derive(Debug, Clone)]
pub struct NamedRun {
    pub label: String,
    pub contract: String,
    pub month: HeatingMonth,
    pub outcome: RunOutcome,
}

/// A tuning history to copy, filed under `label`.
#[derive(Debug, Clone)]
pub struct NamedTuning {
    pub label: String,
    pub result: TuningResult,
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub runs: Vec<NamedRun>,
    pub comparisons: Vec<ContractReport>,
    pub tunings: Vec<NamedTuning>,
}

impl ReportInputs {
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty() && self.comparisons.is_empty() && self.tunings.is_empty()
    }
}

/// Sorted `|PMV|` against empirical quantile `(i + 1) / n`.
pub fn pmv_cdf_points(pmv: &[f64]) -> Vec<(f64, f64)> {
    let mut a: Vec<f64> = pmv.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    a.into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn bill_csv(rows: &[BillRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "contract",
        "month",
        "energy_eur",
        "capacity_eur",
        "fixed_eur",
        "total_eur",
        "peak_kw",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.contract.clone(),
            r.month.to_string(),
            r.energy_eur.clone(),
            r.capacity_eur.clone(),
            r.fixed_eur.clone(),
            r.total_eur.clone(),
            format!("{:.6}", r.peak_kw),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Table with one row per contract and one column per month, then the
/// `SP` and `SR` rows and a per-contract total column.
pub fn comparison_markdown(r: &ContractReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Optimized bills (EUR), seed {}\n", r.seed);
    let _ = write!(s, "| Contract |");
    for m in &r.months {
        let _ = write!(s, " {} |", m.billing_month());
    }
    let _ = writeln!(s, " Total |");
    let _ = writeln!(s, "|---|{}---|", "---|".repeat(r.months.len()));
    for c in &r.contracts {
        let _ = write!(s, "| {c} |");
        for m in &r.months {
            match r.bill(c, *m) {
                Some(b) => {
                    let _ = write!(s, " {b} |");
                }
                None => s.push_str(" n/a |"),
            }
        }
        match r.totals.iter().find(|(code, _)| code == c) {
            Some((_, t)) => {
                let _ = writeln!(s, " {t} |");
            }
            None => s.push_str(" n/a |\n"),
        }
    }
    let summaries: Vec<_> = r.per_month.iter().map(|(_, x)| x.as_ref()).collect();
    s.push_str("| SP |");
    for x in &summaries {
        match x {
            Some(x) => {
                let _ = write!(s, " {} |", x.saving_potential);
            }
            None => s.push_str(" n/a |"),
        }
    }
    match &r.overall {
        Some(o) => {
            let _ = writeln!(s, " {} |", o.saving_potential);
        }
        None => s.push_str(" n/a |\n"),
    }
    s.push_str("| SR |");
    for x in &summaries {
        match x {
            Some(x) => {
                let _ = write!(s, " {} |", pct(x.saving_ratio));
            }
            None => s.push_str(" n/a |"),
        }
    }
    match &r.overall {
        Some(o) => {
            let _ = writeln!(s, " {} |", pct(o.saving_ratio));
        }
        None => s.push_str(" n/a |\n"),
    }
    s.push('\n');
    match &r.overall {
        Some(o) => {
            let _ = writeln!(
                s,
                "Best contract: {} ({}). Worst: {} ({}).",
                o.best, o.best_bill, o.worst, o.worst_bill
            );
        }
        None => s.push_str("No contract has a bill in every month.\n"),
    }
    if !r.failed.is_empty() {
        let _ = writeln!(
            s,
            "\nCells without a feasible bill: {}",
            r.failed.join(", ")
        );
    }
    s
}

/// Same-seed-independent summary of several comparisons.
pub fn stability_markdown(reports: &[ContractReport]) -> String {
    let mut s = String::from(
        "# Best contract per seed\n\n| Seed | Best | SP (EUR) | SR |\n|---|---|---|---|\n",
    );
    for r in reports {
        match &r.overall {
            Some(o) => {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.seed,
                    o.best,
                    o.saving_potential,
                    pct(o.saving_ratio)
                );
            }
            None => {
                let _ = writeln!(s, "| {} | n/a | n/a | n/a |", r.seed);
            }
        }
    }
    let bests: Vec<_> = reports.iter().map(|r| r.best_contract.as_deref()).collect();
    let stable = bests
        .first()
        .is_some_and(|b| b.is_some() && bests.iter().all(|x| x == b));
    let _ = writeln!(
        s,
        "\nStable across seeds: {}",
        if stable { "yes" } else { "no" }
    );
    s
}

/// Bill, comfort and solver summary of every run.
pub fn runs_markdown(runs: &[NamedRun]) -> String {
    let mut s = String::from(
        "# Closed-loop runs\n\n| Run | Controller | Contract | Month | Bill (EUR) | Energy (kWh) | Peak (kW) | PMV p80 | g |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in runs {
        let o = &r.outcome;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {:.4} | {:.4} |",
            r.label,
            o.controller.name(),
            r.contract,
            r.month.billing_month(),
            o.bill.total,
            o.trace.energy_kwh(),
            o.bill.peak_kw,
            o.comfort.pmv_cdf_80,
            o.comfort.g_value
        );
    }
    let base = runs
        .iter()
        .find(|r| r.outcome.controller == ControllerKind::Baseline);
    if let Some(b) = base {
        for r in runs
            .iter()
            .filter(|r| r.outcome.controller != ControllerKind::Baseline)
        {
            let saved = b.outcome.bill.total.milli() - r.outcome.bill.total.milli();
            if b.outcome.bill.total.milli() > 0 {
                let _ = writeln!(
                    s,
                    "\n{} vs {}: {} EUR saved ({})",
                    r.label,
                    b.label,
                    Money(saved),
                    pct(saved as f64 / b.outcome.bill.total.milli() as f64)
                );
            }
        }
    }
    s
}

/// JSONL of tuning records without the wall-clock field.
fn records_jsonl(history: &[EvalRecord]) -> Result<String> {
    let mut s = String::new();
    for r in history {
        let mut v = serde_json::to_value(r)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_s");
        }
        s.push_str(&serde_json::to_string(&v)?);
        s.push('\n');
    }
    Ok(s)
}

fn check_label(label: &str) -> Result<()> {
    let ok = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !label.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!("bad report label {label:?}")))
    }
}

/// Writes the report under `out_dir` and returns the written paths, relative
/// to `out_dir`, in order.
pub fn emit_report(results: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Precondition("nothing to report".into()));
    }
    let mut files: Vec<(PathBuf, String)> = Vec::new();

    if !results.runs.is_empty() {
        let mut rows = Vec::new();
        for r in &results.runs {
            check_label(&r.label)?;
            let o = &r.outcome;
            let row = BillRow::new(&r.contract, r.month.billing_month(), &o.bill);
            let dir = PathBuf::from("runs").join(&r.label);
            files.push((dir.join("bill.csv"), bill_csv(std::slice::from_ref(&row))?));
            rows.push(row);
            let mut trace = Vec::new();
            o.trace.write_csv(&mut trace)?;
            files.push((
                dir.join("trace.csv"),
                String::from_utf8(trace).expect("csv output is utf-8"),
            ));
            let mut cdf = String::from("abs_pmv,quantile\n");
            for (v, q) in pmv_cdf_points(&o.comfort.pmv_series) {
                let _ = writeln!(cdf, "{v:.6},{q:.6}");
            }
            files.push((dir.join("pmv_cdf.csv"), cdf));
        }
        files.push(("bills.csv".into(), bill_csv(&rows)?));
        files.push(("runs.md".into(), runs_markdown(&results.runs)));
    }

    for c in &results.comparisons {
        let dir = PathBuf::from("compare").join(format!("seed{}", c.seed));
        let rows: Vec<BillRow> = c
            .contracts
            .iter()
            .flat_map(|code| c.months.iter().map(move |m| (code, *m)))
            .filter_map(|(code, m)| {
                c.cell(code, m)
                    .and_then(|x| x.bill.as_ref())
                    .map(|b| BillRow::new(code, m.billing_month(), b))
            })
            .collect();
        files.push((dir.join("bills.csv"), bill_csv(&rows)?));
        files.push((dir.join("table.md"), comparison_markdown(c)));
        files.push((
            dir.join("report.json"),
            serde_json::to_string_pretty(c)? + "\n",
        ));
    }
    if results.comparisons.len() > 1 {
        files.push((
            "compare/stability.md".into(),
            stability_markdown(&results.comparisons),
        ));
    }

    for t in &results.tunings {
        check_label(&t.label)?;
        files.push((
            PathBuf::from("tuning").join(format!("{}.jsonl", t.label)),
            records_jsonl(&t.result.history)?,
        ));
    }

    let mut seen = std::collections::BTreeSet::new();
    for (p, _) in &files {
        if !seen.insert(p.clone()) {
            return Err(Error::Precondition(format!(
                "duplicate report file {}",
                p.display()
            )));
        }
    }
    for (p, body) in &files {
        let full = out_dir.join(p);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&full, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billing::BillBreakdown;
    use crate::harness::ContractCell;

    fn bill(m: i64, peak: f64) -> BillBreakdown {
        BillBreakdown {
            energy_cost: Money(m - 1000),
            capacity_cost: Money(0),
            fixed_cost: Money(1000),
            total: Money(m),
            peak_kw: peak,
            day_kwh: 1.0,
            night_kwh: 2.0,
        }
    }

    fn report() -> ContractReport {
        let months = [HeatingMonth::Dec, HeatingMonth::Jan];
        let codes: Vec<String> = vec!["aa".into(), "bb".into()];
        let mut cells = Vec::new();
        for (c, base) in [("aa", 50_000), ("bb", 40_250)] {
            for (i, m) in months.iter().enumerate() {
                cells.push(ContractCell {
                    contract: c.into(),
                    month: *m,
                    seed: 3,
                    bill: Some(bill(base + 1000 * i as i64, 1.5)),
                    best_theta: Some(vec![0.0, 1.0, 21.5, 16.0]),
                    g: Some(-0.1),
                    evaluations: 5,
                    infeasibility_declared: false,
                    error: None,
                });
            }
        }
        ContractReport::build(3, &months, &codes, cells)
    }

    #[test]
    fn empty_results_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&ReportInputs::default(), dir.path()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn cdf_points_are_monotone() {
        let pts = pmv_cdf_points(&[0.3, -0.7, 0.1, -0.2, 0.0]);
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[4], (0.7, 1.0));
        for w in pts.windows(2) {
            assert!(w[0].0 <= w[1].0 && w[0].1 < w[1].1);
        }
    }

    #[test]
    fn table_has_saving_rows() {
        let r = report();
        let md = comparison_markdown(&r);
        assert!(md.contains("| aa | 50.000 | 51.000 | 101.000 |"), "{md}");
        assert!(md.contains("| SP | 9.750 | 9.750 | 19.500 |"), "{md}");
        assert!(md.contains("| SR | 19.50% | 19.12% | 19.31% |"), "{md}");
        assert!(md.contains("Best contract: bb"));
    }

    #[test]
    fn emission_is_repeatable() {
        let r = report();
        let inputs = ReportInputs {
            comparisons: vec![r.clone(), ContractReport { seed: 4, ..r }],
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = emit_report(&inputs, a.path()).unwrap();
        let fb = emit_report(&inputs, b.path()).unwrap();
        assert_eq!(fa, fb);
        for f in &fa {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let csv = std::fs::read_to_string(a.path().join("compare/seed3/bills.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(
            csv.starts_with("contract,month,energy_eur,capacity_eur,fixed_eur,total_eur,peak_kw\n")
        );
        let st = std::fs::read_to_string(a.path().join("compare/stability.md")).unwrap();
        assert!(st.contains("Stable across seeds: yes"));
    }

    #[test]
    fn labels_cannot_escape_the_output_dir() {
        assert!(check_label("../x").is_err());
        assert!(check_label("a/b").is_err());
        assert!(check_label("mask-jan_ddd").is_ok());
    }
}
