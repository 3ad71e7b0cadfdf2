//! `report`: merges artifacts written by `metrics`, `simulate` and `judge`
//! into wide tables, SVG plots and a text summary. Reads inputs only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hicra_core::metrics::{MetricSeries, MetricsReport};
use hicra_core::sim::{two_phase_probe, SERIES_EXEC_ENTROPY, SERIES_REWARD, SERIES_SEMANTIC_ENTROPY};

use crate::commands::{out_dir, write};
use crate::config::ReportConfig;
use crate::plot::{line_chart, Line};
use crate::{Cli, Failure, ReportArgs};

/// Artifact files `report` understands, in reading order.
const SOURCES: [&str; 3] = ["report.json", "series.json", "judge_report.json"];

struct Input {
    label: String,
    sources: Vec<&'static str>,
    report: MetricsReport,
}

fn load(dir: &Path, label: String) -> Result<Input, Failure> {
    let mut merged = MetricsReport::default();
    let mut sources = Vec::new();
    for name in SOURCES {
        let p = dir.join(name);
        if !p.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&p)
            .map_err(|e| Failure::Runtime(format!("report: cannot read {}: {e}", p.display())))?;
        let r = MetricsReport::from_json(&text)?;
        merged.series.extend(r.series);
        merged.scalars.extend(r.scalars);
        sources.push(name);
    }
    if sources.is_empty() {
        return Err(Failure::Validation(format!(
            "report: {} contains none of {}",
            dir.display(),
            SOURCES.join(", ")
        )));
    }
    Ok(Input {
        label,
        sources,
        report: merged,
    })
}

fn labels(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    dirs.iter()
        .map(|d| {
            let base = d
                .canonicalize()
                .ok()
                .and_then(|c| c.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| d.display().to_string());
            let n = seen.entry(base.clone()).or_default();
            *n += 1;
            if *n == 1 { base } else { format!("{base}-{n}") }
        })
        .collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn describe(s: &MetricSeries) -> String {
    let defined = s.defined_values();
    let gaps = s.len() - defined.len();
    let min = defined.iter().copied().reduce(f64::min);
    let max = defined.iter().copied().reduce(f64::max);
    format!(
        "  {:<36} {:<8} {:>6} {:>5} {:>10} {:>10} {:>10} {:>10}{}\n",
        s.name,
        s.unit.as_str(),
        s.len(),
        gaps,
        fmt(defined.first().copied()),
        fmt(defined.last().copied()),
        fmt(min),
        fmt(max),
        if s.lower_bound { "  (lower bound)" } else { "" }
    )
}

fn probe_line(r: &MetricsReport) -> String {
    let needed = [SERIES_REWARD, SERIES_EXEC_ENTROPY, SERIES_SEMANTIC_ENTROPY];
    if needed.iter().any(|n| r.get(n).is_none()) {
        return "  two-phase probe: not applicable (no simulator series)\n".into();
    }
    match two_phase_probe(r) {
        Ok(p) => format!(
            "  two-phase probe: phase1_detected = {}, phase2_detected = {}, crossover_step = {}\n",
            p.phase1_detected,
            p.phase2_detected,
            p.crossover_step.map_or_else(|| "none".into(), |c| c.to_string())
        ),
        Err(e) => format!("  two-phase probe: not available ({e})\n"),
    }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

pub fn run(cli: &Cli, a: &ReportArgs, f: &ReportConfig) -> Result<(), Failure> {
    let dirs = if a.inputs.is_empty() { f.inputs.clone() } else { a.inputs.clone() };
    if dirs.is_empty() {
        return Err(Failure::Validation("report: no --input directories given".into()));
    }
    let inputs = dirs
        .iter()
        .zip(labels(&dirs))
        .map(|(d, l)| load(d, l))
        .collect::<Result<Vec<_>, _>>()?;

    let dir = out_dir(cli)?;
    let tables = dir.join("tables");
    let plots = dir.join("plots");
    for d in [&tables, &plots] {
        std::fs::create_dir_all(d).map_err(|e| crate::io_failure(d, e))?;
    }

    let names: BTreeSet<&str> = inputs.iter().flat_map(|i| i.report.series.iter().map(|s| s.name.as_str())).collect();
    for name in &names {
        let present: Vec<(&str, &MetricSeries)> = inputs
            .iter()
            .filter_map(|i| i.report.get(name).map(|s| (i.label.as_str(), s)))
            .collect();
        let unit = present[0].1.unit.as_str();

        // Wide table: one row per step, one column per input.
        let steps: BTreeSet<u64> = present.iter().flat_map(|(_, s)| s.steps()).collect();
        let lookup: Vec<BTreeMap<u64, Option<f64>>> = present
            .iter()
            .map(|(_, s)| s.points.iter().map(|p| (p.step, p.value)).collect())
            .collect();
        let table_path = tables.join(format!("{}.csv", file_stem(name)));
        let mut w = csv::Writer::from_path(&table_path)
            .map_err(|e| Failure::Runtime(format!("report: {}: {e}", table_path.display())))?;
        let csv_err = |e: csv::Error| Failure::Runtime(format!("report: {}: {e}", table_path.display()));
        let mut header = vec!["step".to_owned()];
        header.extend(present.iter().map(|(l, _)| l.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for step in &steps {
            let mut row = vec![step.to_string()];
            row.extend(lookup.iter().map(|m| m.get(step).copied().flatten().map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Failure::Runtime(format!("report: {}: {e}", table_path.display())))?;

        let lines: Vec<Line> = present
            .iter()
            .map(|(label, s)| Line {
                label,
                points: s.points.iter().map(|p| (p.step as f64, p.value)).collect(),
            })
            .collect();
        write(&plots.join(format!("{}.svg", file_stem(name))), line_chart(name, unit, &lines))?;
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "report over {} input(s), {} series\n", inputs.len(), names.len());
    for input in &inputs {
        let _ = writeln!(summary, "[{}] from {}", input.label, input.sources.join(", "));
        let _ = writeln!(
            summary,
            "  {:<36} {:<8} {:>6} {:>5} {:>10} {:>10} {:>10} {:>10}",
            "series", "unit", "points", "gaps", "first", "last", "min", "max"
        );
        for s in &input.report.series {
            summary.push_str(&describe(s));
        }
        for (k, v) in &input.report.scalars {
            let _ = writeln!(summary, "  {k} = {v:.6}");
        }
        summary.push_str(&probe_line(&input.report));
        summary.push('\n');
    }
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
