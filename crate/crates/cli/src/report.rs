//! Figures and a roll-up of whatever artifacts the run directory holds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gormpo_core::guardian::read_trace;
use gormpo_core::ood_eval::{OodReport, OodRow};
use serde_json::{json, Value};

use crate::commands::{SweepCsvRow, OOD_METRICS, SWEEP};
use crate::error::{CliError, Result};
use crate::manifest::RunContext;
use crate::plot::{render, Panel, Series};

const PENALTY_TRACE: &str = "penalty_trace.csv";
const SUMMARIES: [&str; 8] = [
    "dataset.json",
    "sparse.json",
    "ood_summary.json",
    "dynamics.json",
    "train.json",
    "sweep.json",
    "eval.json",
    "theory.json",
];

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

/// Mean of `metric` over seeds, one series per estimator.
fn ood_series(report: &OodReport, metric: impl Fn(&OodRow) -> f64) -> Vec<Series> {
    let mut by_kind: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in &report.rows {
        let slot = by_kind.entry(r.estimator.to_string()).or_default().entry(r.mu.to_bits()).or_default();
        slot.0 += metric(r);
        slot.1 += 1;
    }
    by_kind
        .into_iter()
        .map(|(label, cells)| {
            let mut points: Vec<(f64, f64)> = cells.into_iter().map(|(mu, (s, n))| (f64::from_bits(mu), s / n as f64)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

fn panel(title: &str, x: &str, y: &str, series: Vec<Series>) -> Panel {
    Panel {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        series,
    }
}

fn ood_figures(ctx: &mut RunContext, figures: &mut Vec<String>) -> Result<()> {
    let report = OodReport::read_csv(&read_text(&ctx.path(OOD_METRICS))?)?;
    let auc = render(&[panel("ROC AUC", "OOD distance μ", "AUC", ood_series(&report, |r| r.auc))])?;
    ctx.write_bytes("ood_auc.svg", auc.as_bytes())?;
    let rates = render(&[
        panel("Accuracy", "OOD distance μ", "accuracy", ood_series(&report, |r| r.accuracy)),
        panel("TPR", "OOD distance μ", "TPR", ood_series(&report, |r| r.tpr)),
        panel("TNR", "OOD distance μ", "TNR", ood_series(&report, |r| r.tnr)),
    ])?;
    ctx.write_bytes("ood_accuracy.svg", rates.as_bytes())?;
    figures.extend(["ood_auc.svg".into(), "ood_accuracy.svg".into()]);
    Ok(())
}

fn penalty_figure(ctx: &mut RunContext, figures: &mut Vec<String>) -> Result<()> {
    let trace = read_trace(&read_text(&ctx.path(PENALTY_TRACE))?)?;
    let mut by_epoch: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for r in &trace {
        let slot = by_epoch.entry(r.epoch).or_default();
        slot.0 += r.u;
        slot.1 += r.r_hat - r.r_tilde;
        slot.2 += 1;
    }
    let series = |f: fn(&(f64, f64, usize)) -> f64| by_epoch.iter().map(|(&e, v)| (e as f64, f(v))).collect::<Vec<_>>();
    let svg = render(&[
        panel("Mean penalty u", "epoch", "u", vec![Series { label: "u".into(), points: series(|v| v.0 / v.2 as f64) }]),
        panel("Mean reward reduction", "epoch", "r̂ − r̃", vec![Series { label: "λu".into(), points: series(|v| v.1 / v.2 as f64) }]),
    ])?;
    ctx.write_bytes("penalty.svg", svg.as_bytes())?;
    figures.push("penalty.svg".into());
    Ok(())
}

fn sweep_figure(ctx: &mut RunContext, figures: &mut Vec<String>) -> Result<()> {
    let mut rows: Vec<SweepCsvRow> = csv::Reader::from_path(ctx.path(SWEEP))?.deserialize().collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let line = |label: &str, f: fn(&SweepCsvRow) -> Option<f64>| Series {
        label: label.into(),
        points: rows.iter().filter_map(|r| f(r).map(|y| (r.lambda, y))).collect(),
    };
    let mut panels = vec![panel("Return", "λ", "mean return", vec![line("return", |r| Some(r.return_mean))])];
    if rows.iter().any(|r| r.ws.is_some()) {
        panels.push(panel("Weaning score", "λ", "WS", vec![line("WS", |r| r.ws)]));
    }
    if rows.iter().any(|r| r.acp.is_some()) {
        panels.push(panel("Action change penalty", "λ", "ACP", vec![line("ACP", |r| r.acp)]));
    }
    let svg = render(&panels)?;
    ctx.write_bytes("lambda_sensitivity.svg", svg.as_bytes())?;
    figures.push("lambda_sensitivity.svg".into());
    Ok(())
}

type Figure = fn(&mut RunContext, &mut Vec<String>) -> Result<()>;

pub fn report(ctx: &mut RunContext) -> Result<()> {
    let mut figures = Vec::new();
    let mut warnings = Vec::new();
    let sources: [(&str, Figure); 3] = [(OOD_METRICS, ood_figures), (PENALTY_TRACE, penalty_figure), (SWEEP, sweep_figure)];
    for (source, draw) in sources {
        let path = ctx.path(source);
        if !path.is_file() {
            warnings.push(format!("{source} is missing; its figures were skipped"));
            continue;
        }
        ctx.require(&path, "report source")?;
        draw(ctx, &mut figures)?;
    }
    let mut summaries = serde_json::Map::new();
    for name in SUMMARIES {
        let path = ctx.path(name);
        if !path.is_file() {
            warnings.push(format!("{name} is missing"));
            continue;
        }
        ctx.require(&path, "summary")?;
        let v: Value = serde_json::from_str(&read_text(&path)?)?;
        summaries.insert(name.trim_end_matches(".json").into(), v);
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    ctx.write_json("report.json", &json!({ "figures": figures, "warnings": warnings, "summaries": summaries }))?;
    println!("{} figures, {} warnings", figures.len(), warnings.len());
    Ok(())
}
