use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::MatrixRow;

use super::metrics::MetricRow;

/// One line of `results.csv`. `value` is an accuracy for accuracy metrics and
/// the named statistic otherwise (`mean_s`, `retention`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub variant: String,
    pub metric: String,
    pub strategy: String,
    pub n: Option<usize>,
    pub budget_units: Option<u64>,
    pub wall_clock_cap_ms: Option<u64>,
    pub n_problems: usize,
    pub value: f64,
    pub se: f64,
    pub wall_clock_ms: Option<f64>,
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "experiment",
    "variant",
    "metric",
    "strategy",
    "n",
    "budget_units",
    "wall_clock_cap_ms",
    "n_problems",
    "value",
    "se",
    "wall_clock_ms",
];

impl ResultRow {
    pub fn stat(
        experiment: &str,
        variant: &str,
        metric: &str,
        n_problems: usize,
        value: f64,
        se: f64,
    ) -> Self {
        ResultRow {
            experiment: experiment.into(),
            variant: variant.into(),
            metric: metric.into(),
            strategy: String::new(),
            n: None,
            budget_units: None,
            wall_clock_cap_ms: None,
            n_problems,
            value,
            se,
            wall_clock_ms: None,
        }
    }

    pub fn from_metric(experiment: &str, variant: &str, m: &MetricRow) -> Self {
        ResultRow {
            strategy: m.strategy.name().into(),
            n: Some(m.n),
            ..Self::stat(
                experiment,
                variant,
                m.metric.name(),
                m.n_problems,
                m.accuracy,
                m.se,
            )
        }
    }

    pub fn from_matrix(experiment: &str, variant: &str, m: &MatrixRow) -> Self {
        ResultRow {
            strategy: m.strategy.name().into(),
            budget_units: m.budget_units,
            wall_clock_cap_ms: m.wall_clock_cap_ms,
            wall_clock_ms: Some(m.wall_clock_ms),
            ..Self::stat(
                experiment,
                variant,
                "accuracy",
                m.n_problems,
                m.accuracy,
                m.se,
            )
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        writer.write_record(RESULT_COLUMNS)?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads `results.csv`, naming the first missing column.
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if let Some(missing) = RESULT_COLUMNS
        .iter()
        .find(|h| !headers.iter().any(|x| x == **h))
    {
        return Err(Error::Schema {
            path: path.into(),
            line: 1,
            message: format!("missing column {missing:?}"),
        });
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Schema {
                path: path.into(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// A named series of (x, y, se) points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// File stem, e.g. `budget_math_chain`.
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Groups result rows into curves: accuracy against generation budget and
/// against wall-clock cap for the search matrix, metrics against N for every
/// candidate-set experiment, and accuracy against hidden size.
pub fn curves(rows: &[ResultRow]) -> Vec<Curve> {
    let mut out: BTreeMap<String, Curve> = BTreeMap::new();
    let mut add =
        |name: String, x_label: &str, y_label: &str, series: String, point: (f64, f64, f64)| {
            let curve = out.entry(name.clone()).or_insert_with(|| Curve {
                name,
                x_label: x_label.into(),
                y_label: y_label.into(),
                series: Vec::new(),
            });
            match curve.series.iter_mut().find(|s| s.name == series) {
                Some(s) => s.points.push(point),
                None => curve.series.push(Series {
                    name: series,
                    points: vec![point],
                }),
            }
        };
    for r in rows {
        let slug = format!("{}_{}", r.experiment, r.variant);
        if r.experiment == "matrix" {
            if let Some(b) = r.budget_units {
                add(
                    format!("budget_{}", r.variant),
                    "generation budget (units)",
                    "accuracy",
                    r.strategy.clone(),
                    (b as f64, r.value, r.se),
                );
            } else if let Some(c) = r.wall_clock_cap_ms {
                add(
                    format!("wall_clock_{}", r.variant),
                    "wall-clock cap (ms)",
                    "accuracy",
                    r.strategy.clone(),
                    (c as f64, r.value, r.se),
                );
            }
        } else if r.experiment == "hidden_sweep" {
            if let (Some(n), Some(h)) = (
                r.n,
                r.variant
                    .strip_prefix('h')
                    .and_then(|h| h.parse::<f64>().ok()),
            ) {
                add(
                    "hidden_sweep".into(),
                    "hidden units",
                    "accuracy",
                    format!("{}@{n}", r.metric),
                    (h, r.value, r.se),
                );
            }
        } else if r.experiment == "training" && r.metric == "validation_accuracy" {
            if let Some(epoch) = r.n {
                add(
                    format!("epochs_{}", r.variant),
                    "epoch",
                    "validation accuracy",
                    "prm".into(),
                    (epoch as f64, r.value, r.se),
                );
            }
        } else if let Some(n) = r.n {
            if matches!(r.metric.as_str(), "prm" | "maj" | "pass") {
                add(
                    format!("n_{slug}"),
                    "candidates N",
                    "accuracy",
                    r.metric.clone(),
                    (n as f64, r.value, r.se),
                );
            }
        }
    }
    let mut curves: Vec<Curve> = out.into_values().collect();
    for c in &mut curves {
        for s in &mut c.series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }
    curves
}

/// Writes each curve as `<name>.csv` and `<name>.svg` into `dir` and
/// returns the written paths. No rows, no files.
pub fn emit_curves(results_csv: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_results_csv(results_csv)?;
    let curves = curves(&rows);
    if curves.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for curve in &curves {
        let csv_path = dir.join(format!("{}.csv", curve.name));
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["series", "x", "y", "se"])?;
        for s in &curve.series {
            for (x, y, se) in &s.points {
                w.write_record([s.name.clone(), x.to_string(), y.to_string(), se.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        written.push(csv_path);
        let svg_path = dir.join(format!("{}.svg", curve.name));
        std::fs::write(&svg_path, svg(curve)).map_err(|e| Error::io(&svg_path, e))?;
        written.push(svg_path);
    }
    Ok(written)
}

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Static line chart with one polyline per series and a legend.
fn svg(curve: &Curve) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let pts = curve.series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y, se) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y - se);
        y1 = y1.max(y + se);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        curve.name
    );
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        t = pad,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 15.0,
        curve.x_label
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{}</text>"#,
        h / 2.0,
        h / 2.0,
        curve.y_label
    );
    for (v, anchor, x, y) in [
        (x0, "middle", px(x0), h - pad + 16.0),
        (x1, "middle", px(x1), h - pad + 16.0),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v}</text>"#
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            pad - 6.0,
            py(v) + 4.0
        );
    }
    for (i, series) in curve.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y, _)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            points.join(" ")
        );
        for &(x, y, se) in &series.points {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.1}" x2="{0:.1}" y1="{1:.1}" y2="{2:.1}" stroke="{color}"/><circle cx="{0:.1}" cy="{3:.1}" r="3" fill="{color}"/>"#,
                px(x),
                py(y - se),
                py(y + se),
                py(y)
            );
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
            w - pad + 4.0,
            series.name
        );
    }
    s.push_str("</svg>\n");
    s
}
