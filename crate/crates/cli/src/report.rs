//! Aggregates evaluated runs into `summary.csv` and a grouped bar chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::exit::CliError;
use crate::pipeline::{mean_std, MetricRow, METRICS_HEADER};

/// `metrics.csv` inside a run directory (`<run>/eval/metrics.csv`), an
/// evaluation directory, or the file itself.
pub fn metrics_path(run: &Path) -> PathBuf {
    if run.is_file() {
        return run.to_path_buf();
    }
    let nested = run.join("eval").join("metrics.csv");
    if nested.exists() {
        nested
    } else {
        run.join("metrics.csv")
    }
}

pub fn parse_metrics(text: &str) -> std::result::Result<Vec<MetricRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        Some(h) => return Err(format!("header {h:?}, expected {METRICS_HEADER:?}")),
        None => return Err("empty file".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(format!("line {}: {} fields, expected 6", i + 2, f.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {s:?}: {e}", i + 2));
            Ok(MetricRow {
                run_id: f[0].to_string(),
                method: f[1].to_string(),
                group: f[2].to_string(),
                m: f[3].parse().map_err(|e| format!("line {}: M {:?}: {e}", i + 2, f[3]))?,
                auc: num(f[4])?,
                auc_std: num(f[5])?,
            })
        })
        .collect()
}

/// Reads every run, collecting all schema problems before failing.
pub fn read_runs(runs: &[PathBuf]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for run in runs {
        let path = metrics_path(run);
        match fs::read_to_string(&path) {
            Ok(text) => match parse_metrics(&text) {
                Ok(r) => rows.extend(r),
                Err(e) => problems.push(format!("{}: {e}", path.display())),
            },
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Input(format!("inconsistent run files:\n  {}", problems.join("\n  "))).into());
    }
    if rows.is_empty() {
        return Err(CliError::Input("no metric rows in the given runs".into()).into());
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub m: usize,
    pub group: String,
    pub runs: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
}

/// Mean and spread of the per-run AUCs of each (method, M, group) cell.
pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.method.clone(), r.m, r.group.clone())).or_default().push(r.auc);
    }
    cells
        .into_iter()
        .map(|((method, m, group), v)| {
            let (auc_mean, auc_std) = mean_std(&v);
            AggregateRow {
                method,
                m,
                group,
                runs: v.len(),
                auc_mean,
                auc_std,
            }
        })
        .collect()
}

pub fn summary_csv(agg: &[AggregateRow]) -> String {
    let mut out = String::from("method,M,group,runs,auc_mean,auc_std\n");
    for a in agg {
        let _ = writeln!(out, "{},{},{},{},{},{}", a.method, a.m, a.group, a.runs, a.auc_mean, a.auc_std);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f"];

/// Bars of mean AUC per patient group, one series per (method, M), with
/// standard-deviation whiskers and a chance line at 0.5.
pub fn bar_chart_svg(agg: &[AggregateRow]) -> String {
    let mut groups: Vec<&str> = agg.iter().map(|a| a.group.as_str()).collect();
    groups.dedup();
    groups.sort_unstable();
    groups.dedup();
    let mut series: Vec<(&str, usize)> = agg.iter().map(|a| (a.method.as_str(), a.m)).collect();
    series.sort_unstable();
    series.dedup();

    let (left, top, plot_h, bottom) = (60.0, 30.0, 260.0, 60.0);
    let bar_w = 18.0;
    let group_w = bar_w * series.len() as f64 + 30.0;
    let plot_w = group_w * groups.len() as f64;
    let legend_w = 150.0;
    let width = left + plot_w + 20.0 + legend_w;
    let height = top + plot_h + bottom;
    let y_of = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#888888" stroke-dasharray="4 3"/>"##,
        left + plot_w,
        y = y_of(0.5)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">AUC</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (gi, group) in groups.iter().enumerate() {
        let gx = left + gi as f64 * group_w + 15.0;
        for (si, (method, m)) in series.iter().enumerate() {
            let Some(a) = agg.iter().find(|a| a.group == *group && a.method == *method && a.m == *m) else {
                continue;
            };
            let x = gx + si as f64 * bar_w;
            let y = y_of(a.auc_mean);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{}" height="{}" fill="{}"><title>{} M={} {}: {:.3} ± {:.3}</title></rect>"#,
                bar_w - 2.0,
                top + plot_h - y,
                PALETTE[si % PALETTE.len()],
                escape(method),
                m,
                escape(group),
                a.auc_mean,
                a.auc_std
            );
            if a.auc_std > 0.0 {
                let cx = x + (bar_w - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
                    y_of(a.auc_mean - a.auc_std),
                    y_of(a.auc_mean + a.auc_std)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            gx + bar_w * series.len() as f64 / 2.0,
            top + plot_h + 18.0,
            escape(group)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let lx = left + plot_w + 20.0;
    for (si, (method, m)) in series.iter().enumerate() {
        let ly = top + 14.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{} (M={m})</text>"#,
            PALETTE[si % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            escape(method)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.csv` and `auc.svg` into `out`.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<AggregateRow>> {
    let rows = read_runs(runs)?;
    let agg = aggregate(&rows);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("summary.csv"), summary_csv(&agg)).context("writing summary.csv")?;
    fs::write(out.join("auc.svg"), bar_chart_svg(&agg)).context("writing auc.svg")?;
    Ok(agg)
}
