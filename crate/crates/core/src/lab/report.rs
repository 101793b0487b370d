//! Run artifacts on disk: CSV writers and readers for the metrics,
//! sparsity, and retention tables, plus an SVG report rendered strictly
//! from those CSVs so it regenerates byte-identically from a run
//! directory alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{RunRow, SparsityProfile};

use super::{io_at, LabError};

pub const METRICS_HEADER: &str =
    "iteration,method,new_task_acc,prior_task_acc,mean_reward,frobenius_vs_base,kl_vs_base";
pub const SPARSITY_HEADER: &str = "iteration,layer_index,group,sparsity,count,tau";
pub const PARETO_HEADER: &str = "new_task_acc,prior_task_acc,iteration";

/// Writes the per-checkpoint metrics table. Floats use the shortest
/// representation that parses back to the same value, so the file is a
/// lossless, deterministic encoding of the rows.
pub fn write_metrics_csv(path: &Path, method: &str, rows: &[RunRow]) -> Result<(), LabError> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            method,
            r.new_task_acc,
            r.prior_task_acc,
            r.mean_reward,
            r.frobenius_vs_base,
            r.kl_vs_base
        );
    }
    fs::write(path, out).map_err(|e| io_at(path, e))
}

/// Writes one row per (checkpoint, tensor-group) sparsity bucket.
pub fn write_sparsity_csv(
    path: &Path,
    profiles: &[(usize, SparsityProfile)],
) -> Result<(), LabError> {
    let mut out = String::from(SPARSITY_HEADER);
    out.push('\n');
    for (iteration, profile) in profiles {
        for g in &profile.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                iteration,
                g.group.layer_index,
                g.group.kind.label(),
                g.sparsity,
                g.count,
                profile.tau
            );
        }
    }
    fs::write(path, out).map_err(|e| io_at(path, e))
}

/// Writes the accuracy trade-off table, one row per checkpoint.
pub fn write_pareto_csv(path: &Path, table: &[(f64, f64, usize)]) -> Result<(), LabError> {
    let mut out = String::from(PARETO_HEADER);
    out.push('\n');
    for (new_acc, prior_acc, iteration) in table {
        let _ = writeln!(out, "{new_acc},{prior_acc},{iteration}");
    }
    fs::write(path, out).map_err(|e| io_at(path, e))
}

fn malformed(path: &Path, line: usize, detail: impl Into<String>) -> LabError {
    LabError::MalformedCsv { path: path.to_path_buf(), line, detail: detail.into() }
}

/// Data lines (1-based numbering preserved) after validating the header.
fn read_table(path: &Path, header: &str) -> Result<Vec<(usize, String)>, LabError> {
    let text = fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.to_string()));
    match lines.next() {
        Some((_, first)) if first == header => {}
        Some((_, first)) => {
            return Err(malformed(path, 1, format!("expected header `{header}`, got `{first}`")))
        }
        None => return Err(malformed(path, 1, format!("empty file, expected header `{header}`"))),
    }
    Ok(lines.filter(|(_, l)| !l.is_empty()).collect())
}

fn fields<'l>(
    path: &Path,
    line: usize,
    text: &'l str,
    expected: usize,
) -> Result<Vec<&'l str>, LabError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != expected {
        return Err(malformed(
            path,
            line,
            format!("expected {expected} fields, got {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn field<T: FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T, LabError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| malformed(path, line, format!("bad {name} `{raw}`: {e}")))
}

/// Parsed `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    /// Training method label, from the first data row ("?" when empty).
    pub method: String,
    pub rows: Vec<RunRow>,
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsFile, LabError> {
    let mut method = String::from("?");
    let mut rows = Vec::new();
    for (line, text) in read_table(path, METRICS_HEADER)? {
        let p = fields(path, line, &text, 7)?;
        if rows.is_empty() {
            method = p[1].to_string();
        }
        rows.push(RunRow {
            iteration: field(path, line, "iteration", p[0])?,
            new_task_acc: field(path, line, "new_task_acc", p[2])?,
            prior_task_acc: field(path, line, "prior_task_acc", p[3])?,
            mean_reward: field(path, line, "mean_reward", p[4])?,
            frobenius_vs_base: field(path, line, "frobenius_vs_base", p[5])?,
            kl_vs_base: field(path, line, "kl_vs_base", p[6])?,
        });
    }
    Ok(MetricsFile { method, rows })
}

/// One `sparsity.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub iteration: usize,
    pub layer_index: u32,
    pub group: String,
    pub sparsity: f64,
    pub count: usize,
    pub tau: f64,
}

pub fn read_sparsity_csv(path: &Path) -> Result<Vec<SparsityRow>, LabError> {
    let mut rows = Vec::new();
    for (line, text) in read_table(path, SPARSITY_HEADER)? {
        let p = fields(path, line, &text, 6)?;
        rows.push(SparsityRow {
            iteration: field(path, line, "iteration", p[0])?,
            layer_index: field(path, line, "layer_index", p[1])?,
            group: p[2].to_string(),
            sparsity: field(path, line, "sparsity", p[3])?,
            count: field(path, line, "count", p[4])?,
            tau: field(path, line, "tau", p[5])?,
        });
    }
    Ok(rows)
}

pub fn read_pareto_csv(path: &Path) -> Result<Vec<(f64, f64, usize)>, LabError> {
    let mut rows = Vec::new();
    for (line, text) in read_table(path, PARETO_HEADER)? {
        let p = fields(path, line, &text, 3)?;
        rows.push((
            field(path, line, "new_task_acc", p[0])?,
            field(path, line, "prior_task_acc", p[1])?,
            field(path, line, "iteration", p[2])?,
        ));
    }
    Ok(rows)
}

/// Renders `report.svg` in `dir` from `metrics.csv`, `sparsity.csv`, and
/// `pareto.csv` found there. The CSVs are the only inputs, so the file
/// regenerates byte-identically for as long as they are unchanged.
pub fn write_report(dir: &Path) -> Result<PathBuf, LabError> {
    let metrics = read_metrics_csv(&dir.join("metrics.csv"))?;
    let sparsity = read_sparsity_csv(&dir.join("sparsity.csv"))?;
    let pareto = read_pareto_csv(&dir.join("pareto.csv"))?;
    let svg = render_svg(&metrics, &sparsity, &pareto);
    let path = dir.join("report.svg");
    fs::write(&path, svg).map_err(|e| io_at(&path, e))?;
    Ok(path)
}

const CANVAS_W: f64 = 1180.0;
const CANVAS_H: f64 = 600.0;
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 200.0;
const COL_X: [f64; 3] = [60.0, 445.0, 830.0];
const ROW_Y: [f64; 2] = [70.0, 350.0];

const COLOR_NEW: &str = "#1f77b4";
const COLOR_PRIOR: &str = "#d62728";
const COLOR_DRIFT: &str = "#2ca02c";
const COLOR_KL: &str = "#9467bd";
const COLOR_PARETO: &str = "#ff7f0e";
const COLOR_BAR: &str = "#8c564b";

/// Linear data-to-unit mapping with degenerate and empty ranges padded
/// so plots never divide by zero.
struct Scale {
    min: f64,
    max: f64,
}

impl Scale {
    fn of(values: impl IntoIterator<Item = f64>) -> Scale {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if min > max {
            return Scale { min: 0.0, max: 1.0 };
        }
        if min == max {
            return Scale { min: min - 0.5, max: max + 0.5 };
        }
        Scale { min, max }
    }

    fn unit() -> Scale {
        Scale { min: 0.0, max: 1.0 }
    }

    fn t(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// One plot area in canvas pixels.
struct Frame {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn at(col: usize, row: usize) -> Frame {
        Frame { x: COL_X[col], y: ROW_Y[row], w: PANEL_W, h: PANEL_H }
    }

    fn px(&self, xs: &Scale, v: f64) -> f64 {
        self.x + xs.t(v) * self.w
    }

    fn py(&self, ys: &Scale, v: f64) -> f64 {
        self.y + self.h * (1.0 - ys.t(v))
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Compact axis label: plain decimal in a sane range, scientific outside.
fn tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(0.001..10000.0).contains(&a) {
        return format!("{v:e}");
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, size: u32, fill: &str, body: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="{size}" fill="{fill}">{}</text>"#,
        esc(body)
    );
}

/// Frame rectangle, panel title, and min/max labels on both axes.
fn chrome(out: &mut String, f: &Frame, title: &str, xs: &Scale, ys: &Scale, x_caption: &str) {
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444" stroke-width="1"/>"##,
        f.x, f.y, f.w, f.h
    );
    text(out, f.x + f.w / 2.0, f.y - 8.0, "middle", 12, "#222", title);
    text(out, f.x, f.y + f.h + 14.0, "start", 10, "#555", &tick(xs.min));
    text(out, f.x + f.w, f.y + f.h + 14.0, "end", 10, "#555", &tick(xs.max));
    text(out, f.x - 6.0, f.y + f.h, "end", 10, "#555", &tick(ys.min));
    text(out, f.x - 6.0, f.y + 10.0, "end", 10, "#555", &tick(ys.max));
    text(out, f.x + f.w / 2.0, f.y + f.h + 28.0, "middle", 10, "#555", x_caption);
}

struct Stroke<'a> {
    color: &'a str,
    dash: Option<&'a str>,
    opacity: f64,
}

impl<'a> Stroke<'a> {
    fn solid(color: &'a str) -> Stroke<'a> {
        Stroke { color, dash: None, opacity: 1.0 }
    }
}

fn polyline(out: &mut String, f: &Frame, xs: &Scale, ys: &Scale, pts: &[(f64, f64)], s: Stroke) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> =
        pts.iter().map(|(x, y)| format!("{:.2},{:.2}", f.px(xs, *x), f.py(ys, *y))).collect();
    let dash_attr = match s.dash {
        Some(d) => format!(r#" stroke-dasharray="{d}""#),
        None => String::new(),
    };
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{}" stroke-width="1.5" stroke-opacity="{}"{dash_attr} points="{}"/>"#,
        s.color,
        s.opacity,
        coords.join(" ")
    );
}

fn dots(out: &mut String, f: &Frame, xs: &Scale, ys: &Scale, pts: &[(f64, f64)], color: &str) {
    for (x, y) in pts {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
            f.px(xs, *x),
            f.py(ys, *y)
        );
    }
}

fn render_svg(metrics: &MetricsFile, sparsity: &[SparsityRow], pareto: &[(f64, f64, usize)]) -> String {
    let rows = &metrics.rows;
    let xs = Scale::of(rows.iter().map(|r| r.iteration as f64));
    let series = |get: fn(&RunRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.iteration as f64, get(r))).collect()
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" height="{CANVAS_H}" viewBox="0 0 {CANVAS_W} {CANVAS_H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{CANVAS_W}" height="{CANVAS_H}" fill="white"/>"#);
    let _ = writeln!(out, "<g font-family=\"monospace\">");
    text(
        &mut out,
        20.0,
        28.0,
        "start",
        14,
        "#111",
        &format!("fine-tuning run report ({})", metrics.method),
    );

    // Held-out accuracy on both tasks.
    let f = Frame::at(0, 0);
    let unit = Scale::unit();
    chrome(&mut out, &f, "held-out accuracy", &xs, &unit, "iteration");
    polyline(&mut out, &f, &xs, &unit, &series(|r| r.new_task_acc), Stroke::solid(COLOR_NEW));
    polyline(
        &mut out,
        &f,
        &xs,
        &unit,
        &series(|r| r.prior_task_acc),
        Stroke { dash: Some("4 3"), ..Stroke::solid(COLOR_PRIOR) },
    );
    let legend = [(COLOR_NEW, "new task"), (COLOR_PRIOR, "prior task")];
    for (i, (color, label)) in legend.iter().enumerate() {
        let ly = f.y + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            f.x + f.w - 110.0,
            f.x + f.w - 90.0
        );
        text(&mut out, f.x + f.w - 84.0, ly + 4.0, "start", 10, "#333", label);
    }

    // Parameter drift, linear and log.
    let f = Frame::at(1, 0);
    let drift = series(|r| r.frobenius_vs_base);
    let ys = Scale::of(drift.iter().map(|p| p.1).chain([0.0]));
    chrome(&mut out, &f, "parameter distance from base", &xs, &ys, "iteration");
    polyline(&mut out, &f, &xs, &ys, &drift, Stroke::solid(COLOR_DRIFT));

    let f = Frame::at(2, 0);
    let log_floor = -12.0;
    let log_drift: Vec<(f64, f64)> = drift
        .iter()
        .map(|(x, v)| (*x, if *v > 0.0 { v.log10().max(log_floor) } else { log_floor }))
        .collect();
    let ys = Scale::of(log_drift.iter().map(|p| p.1));
    chrome(&mut out, &f, "log10 parameter distance", &xs, &ys, "iteration");
    polyline(&mut out, &f, &xs, &ys, &log_drift, Stroke::solid(COLOR_DRIFT));

    // Divergence of the tuned policy from the base on new-task prompts.
    let f = Frame::at(0, 1);
    let kl = series(|r| r.kl_vs_base);
    let ys = Scale::of(kl.iter().map(|p| p.1).chain([0.0]));
    chrome(&mut out, &f, "mean exact KL from base", &xs, &ys, "iteration");
    polyline(&mut out, &f, &xs, &ys, &kl, Stroke::solid(COLOR_KL));

    // Accuracy trade-off, one point per checkpoint in iteration order.
    let f = Frame::at(1, 1);
    let pts: Vec<(f64, f64)> = pareto.iter().map(|(n, p, _)| (*n, *p)).collect();
    chrome(&mut out, &f, "retention frontier", &unit, &unit, "new-task accuracy");
    let faint = Stroke { opacity: 0.35, ..Stroke::solid(COLOR_PARETO) };
    polyline(&mut out, &f, &unit, &unit, &pts, faint);
    dots(&mut out, &f, &unit, &unit, &pts, COLOR_PARETO);

    // Final-checkpoint sparsity, one bar per tensor group.
    let f = Frame::at(2, 1);
    let last_iter = sparsity.iter().map(|r| r.iteration).max();
    let bars: Vec<&SparsityRow> =
        sparsity.iter().filter(|r| Some(r.iteration) == last_iter).collect();
    let tau_label = bars.first().map(|b| format!("{:e}", b.tau)).unwrap_or_default();
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444" stroke-width="1"/>"##,
        f.x, f.y, f.w, f.h
    );
    text(&mut out, f.x + f.w / 2.0, f.y - 8.0, "middle", 12, "#222", "final update sparsity");
    text(
        &mut out,
        f.x + f.w / 2.0,
        f.y + f.h + 14.0,
        "middle",
        10,
        "#555",
        &format!("fraction of weights moved less than {tau_label}"),
    );
    if !bars.is_empty() {
        let slot = f.h / bars.len() as f64;
        for (i, b) in bars.iter().enumerate() {
            let top = f.y + slot * i as f64;
            text(
                &mut out,
                f.x + 4.0,
                top + 11.0,
                "start",
                9,
                "#333",
                &format!("{} L{} ({})", b.group, b.layer_index, b.count),
            );
            let bar_w = (b.sparsity.clamp(0.0, 1.0)) * (f.w - 60.0);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{COLOR_BAR}"/>"#,
                f.x + 4.0,
                top + 15.0,
                bar_w,
                (slot - 20.0).max(4.0)
            );
            text(
                &mut out,
                f.x + 8.0 + bar_w,
                top + 15.0 + (slot - 20.0).max(4.0) / 2.0 + 3.0,
                "start",
                9,
                "#333",
                &tick(b.sparsity),
            );
        }
    }

    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, "</svg>");
    out
}
