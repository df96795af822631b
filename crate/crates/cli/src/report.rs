//! CSV, JSON and SVG writers for the CLI outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use smpc::artifact::{DesignArtifact, ProfileArtifact, TubeArtifact};
use smpc::config::Format;
use smpc::design::FeasibilityEntry;
use smpc::simulator::{ControllerReport, SimulationReport, SweepPoint};

use crate::svg::{Chart, Series};

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_svg(path: &Path, chart: &Chart) -> Result<()> {
    fs::write(path, chart.render()).with_context(|| format!("writing {}", path.display()))
}

pub fn print_feasibility(entries: &[FeasibilityEntry]) {
    println!("{:<16} {:<12} {:>8}  {:<10} per-row slack (1 - saturation)", "controller", "kind", "min", "verdict");
    for e in entries {
        let min = e.rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
        let rows: Vec<String> = e.rows.iter().map(|r| format!("{:+.4}", r.slack)).collect();
        let verdict = if e.feasible {
            "feasible"
        } else if e.terminal_empty && e.rows.iter().all(|r| r.feasible) {
            "empty X_f"
        } else {
            "INFEASIBLE"
        };
        println!(
            "{:<16} {:<12} {:>+8.4}  {:<10} [{}]",
            e.name,
            e.kind.to_string(),
            min,
            verdict,
            rows.join(", ")
        );
    }
}

fn max_of(p: &ProfileArtifact, rows: usize) -> f64 {
    p.saturation.iter().take(rows).copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest tightening values of each tube over the first `state_rows` rows.
pub fn print_tubes(art: &DesignArtifact, state_rows: usize) {
    for (i, t) in art.tubes.iter().enumerate() {
        let gain: Vec<String> = t.k.iter().flatten().map(|v| format!("{v:.4}")).collect();
        println!(
            "tube {i}: K = [{}]{}  rho(Phi) = {:.4}  k_bar = {}",
            gain.join(", "),
            t.weight.map(|w| format!("  (tuned weight {w:.4})")).unwrap_or_default(),
            t.spectral_radius,
            t.k_bar
        );
        let mut line = format!(
            "  gamma_max = {:.4}  beta_max = {:.4}",
            max_of(&t.gamma, state_rows),
            max_of(&t.beta, state_rows)
        );
        for bt in &t.beta_tilde {
            line.push_str(&format!("  beta_tilde_max(M={}) = {:.4}", bt.m, max_of(&bt.profile, state_rows)));
        }
        println!("{line}");
    }
}

fn summary_header(state_rows: usize) -> Vec<String> {
    let mut h: Vec<String> = ["controller", "kind", "avg_cost", "avg_cost_x100", "normalized_cost"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..state_rows).map(|j| format!("violation_pct_row{j}")));
    h.extend(
        [
            "violation_any_pct",
            "feasibility_failures",
            "performance_bound",
            "completed",
            "alarms",
            "candidate_checks",
            "candidate_failures",
            "min_candidate_slack",
            "dominance_failures",
            "input_violations",
            "mean_qp_iterations",
            "max_qp_iterations",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

fn summary_row(r: &ControllerReport) -> Vec<String> {
    let mut row = vec![
        r.name.clone(),
        r.kind.clone(),
        r.avg_cost.to_string(),
        (100.0 * r.avg_cost).to_string(),
        opt(r.normalized_cost),
    ];
    row.extend(r.violation_rate.iter().map(|v| (100.0 * v).to_string()));
    row.extend([
        (100.0 * r.violation_any).to_string(),
        r.feasibility_failures.to_string(),
        r.performance_bound.to_string(),
        r.completed.to_string(),
        r.alarms.len().to_string(),
        r.checks.candidates.to_string(),
        r.checks.candidate_failures.to_string(),
        opt(r.checks.min_candidate_slack),
        r.checks.dominance_failures.to_string(),
        r.checks.input_violations.to_string(),
        r.mean_qp_iterations.to_string(),
        r.max_qp_iterations.to_string(),
    ]);
    row
}

pub fn print_report(report: &SimulationReport) {
    println!(
        "{:<16} {:<12} {:>12} {:>11} {:>13} {:>10} {:>7}",
        "controller", "kind", "l_avg x 100", "normalized", "violation %", "fallbacks", "alarms"
    );
    for r in &report.controllers {
        let viol: Vec<String> = r.violation_rate.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
        println!(
            "{:<16} {:<12} {:>12.4} {:>11} {:>13} {:>10} {:>7}",
            r.name,
            r.kind,
            100.0 * r.avg_cost,
            r.normalized_cost.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            viol.join("/"),
            r.feasibility_failures,
            r.alarms.len()
        );
    }
}

pub fn write_simulation(dir: &Path, formats: &[Format], report: &SimulationReport) -> Result<()> {
    let state_rows = report.controllers.first().map_or(0, |r| r.violation_rate.len());
    if formats.contains(&Format::Json) {
        write_json(&dir.join("report.json"), report)?;
    }
    if formats.contains(&Format::Csv) {
        let rows: Vec<Vec<String>> = report.controllers.iter().map(summary_row).collect();
        write_csv(&dir.join("summary.csv"), &summary_header(state_rows), &rows)?;

        let header: Vec<String> = ["controller", "realization", "avg_cost", "violations", "infeasible_steps"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = report
            .controllers
            .iter()
            .flat_map(|c| {
                c.realizations.iter().map(move |s| {
                    vec![
                        c.name.clone(),
                        s.index.to_string(),
                        s.avg_cost.to_string(),
                        s.violations.to_string(),
                        s.infeasible_steps.to_string(),
                    ]
                })
            })
            .collect();
        write_csv(&dir.join("realizations.csv"), &header, &rows)?;

        let mut header = vec!["k".to_string()];
        header.extend(report.controllers.iter().map(|c| c.name.clone()));
        let steps = report.experiment.steps;
        let rows: Vec<Vec<String>> = (0..steps)
            .map(|k| {
                let mut row = vec![k.to_string()];
                row.extend(report.controllers.iter().map(|c| c.violation_curve[k].to_string()));
                row
            })
            .collect();
        write_csv(&dir.join("violation_curve.csv"), &header, &rows)?;
    }
    if formats.contains(&Format::Svg) {
        let series = report
            .controllers
            .iter()
            .map(|c| {
                Series::line(
                    c.name.clone(),
                    c.violation_curve.iter().enumerate().map(|(k, v)| (k as f64, 100.0 * v)).collect(),
                )
            })
            .collect();
        let chart = Chart {
            title: "Constraint violations over time".into(),
            x_label: "time step k".into(),
            y_label: "realizations violating (%)".into(),
            series,
            x_ticks: None,
        };
        write_svg(&dir.join("violation_curve.svg"), &chart)?;
    }
    Ok(())
}

#[derive(Serialize)]
pub struct SweepOutput<'a> {
    pub reference: Option<String>,
    pub reference_cost: Option<f64>,
    pub baselines: &'a SimulationReport,
    pub points: &'a [SweepPoint],
}

fn sweep_label(p: &SweepPoint) -> String {
    p.m.to_string()
}

pub fn write_sweep(dir: &Path, formats: &[Format], out: &SweepOutput<'_>, state_rows: usize) -> Result<()> {
    if formats.contains(&Format::Json) {
        write_json(&dir.join("sweep.json"), out)?;
    }
    let norm = |c: f64| out.reference_cost.map_or(c, |r| c / r);
    if formats.contains(&Format::Csv) {
        let mut header: Vec<String> = ["M", "weight", "gain", "avg_cost", "normalized_cost"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..state_rows).map(|j| format!("violation_pct_row{j}")));
        header.extend(["alarms".to_string(), "error".to_string()]);
        let rows: Vec<Vec<String>> = out
            .points
            .iter()
            .map(|p| {
                let gain: Vec<String> = p.gain.iter().map(|v| v.to_string()).collect();
                let mut row = vec![sweep_label(p), opt(p.weight), gain.join(" ")];
                match &p.report {
                    Some(r) => {
                        row.push(r.avg_cost.to_string());
                        row.push(norm(r.avg_cost).to_string());
                        row.extend(r.violation_rate.iter().map(|v| (100.0 * v).to_string()));
                        row.push(r.alarms.len().to_string());
                    }
                    None => {
                        row.extend(std::iter::repeat_n(String::new(), 2 + state_rows));
                        row.push("0".into());
                    }
                }
                row.push(p.error.clone().unwrap_or_default());
                row
            })
            .collect();
        write_csv(&dir.join("sweep.csv"), &header, &rows)?;
    }
    if formats.contains(&Format::Svg) {
        let n = out.points.len();
        let points: Vec<(f64, f64)> = out
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.report.as_ref().map(|r| (i as f64, norm(r.avg_cost))))
            .collect();
        let mut series = vec![Series::line("MS-SMPC", points).with_markers()];
        for c in &out.baselines.controllers {
            if c.kind == "rs" || c.kind == "if" {
                let y = norm(c.avg_cost);
                series.push(Series::line(c.name.clone(), vec![(0.0, y), ((n.max(2) - 1) as f64, y)]).dashed());
            }
        }
        let chart = Chart {
            title: "Closed-loop cost over the multi-step length".into(),
            x_label: "M".into(),
            y_label: if out.reference_cost.is_some() {
                "normalized average cost".into()
            } else {
                "average cost".into()
            },
            series,
            x_ticks: Some(out.points.iter().enumerate().map(|(i, p)| (i as f64, sweep_label(p))).collect()),
        };
        write_svg(&dir.join("sweep.svg"), &chart)?;
    }
    Ok(())
}

fn column(p: &ProfileArtifact, row: usize, upto: usize) -> Result<Vec<f64>> {
    let prof = p.to_profile()?;
    Ok((0..=upto).map(|i| prof.value(i, row)).collect())
}

/// Tightening profiles of one tube: a CSV with every row and index, one
/// chart per row comparing the three profiles and one chart of `γ` against
/// its saturation.
pub fn write_tightening(dir: &Path, formats: &[Format], tube: usize, t: &TubeArtifact, upto: usize) -> Result<()> {
    let rows = t.gamma.rows;
    let mut named: Vec<(String, &ProfileArtifact)> = vec![("gamma".into(), &t.gamma), ("beta".into(), &t.beta)];
    for bt in &t.beta_tilde {
        named.push((format!("beta_tilde_M{}", bt.m), &bt.profile));
    }
    named.push(("a".into(), &t.a));
    let cols: Vec<Vec<Vec<f64>>> = named
        .iter()
        .map(|(_, p)| (0..rows).map(|j| column(p, j, upto)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    if formats.contains(&Format::Csv) {
        let mut header = vec!["i".to_string()];
        for (name, _) in &named {
            header.extend((0..rows).map(|j| format!("{name}_row{j}")));
        }
        for j in 0..rows {
            header.push(format!("gamma_max_row{j}"));
        }
        let data: Vec<Vec<String>> = (0..=upto)
            .map(|i| {
                let mut row = vec![i.to_string()];
                for c in &cols {
                    row.extend(c.iter().map(|col| col[i].to_string()));
                }
                row.extend(t.gamma.saturation.iter().map(|v| v.to_string()));
                row
            })
            .collect();
        write_csv(&dir.join(format!("tightening_tube{tube}.csv")), &header, &data)?;
    }
    if formats.contains(&Format::Svg) {
        let xs = |v: &[f64]| v.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect::<Vec<_>>();
        for j in 0..rows {
            let mut series = vec![Series::line("gamma_i", xs(&cols[0][j]))];
            for (k, (name, _)) in named.iter().enumerate().skip(2) {
                if let Some(m) = name.strip_prefix("beta_tilde_M") {
                    series.push(Series::line(format!("beta_tilde_i (M={m})"), xs(&cols[k][j])));
                }
            }
            series.push(Series::line("beta_i", xs(&cols[1][j])));
            let chart = Chart {
                title: format!("Tightening of constraint row {j} (tube {tube})"),
                x_label: "index i".into(),
                y_label: "tightening".into(),
                series,
                x_ticks: None,
            };
            write_svg(&dir.join(format!("tightening_tube{tube}_row{j}.svg")), &chart)?;
        }
        let mut series = Vec::new();
        for j in 0..rows {
            series.push(Series::line(format!("gamma_k row {j}"), xs(&cols[0][j])));
            let g = t.gamma.saturation[j];
            series.push(Series::line(format!("gamma_max row {j}"), vec![(0.0, g), (upto as f64, g)]).dashed());
        }
        let chart = Chart {
            title: format!("Stochastic tightening and its bound (tube {tube})"),
            x_label: "k".into(),
            y_label: "tightening".into(),
            series,
            x_ticks: None,
        };
        write_svg(&dir.join(format!("gamma_max_tube{tube}.svg")), &chart)?;
    }
    Ok(())
}
