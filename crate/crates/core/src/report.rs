//! Aggregation and rendering of benchmark results.
//!
//! [`summarize`] folds per-run records into per-method rows grouped by
//! dataset and confidence level, marking the narrowest clean method.
//! [`render_table`] prints those rows as fixed-width text, and
//! [`render_scatter`] / [`render_lines`] emit self-contained SVG documents.
//! All rendering is pure string building from the inputs, so replaying the
//! same records reproduces the output byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkRecord;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// One method's aggregate at a single dataset and confidence level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_picp: f64,
    /// Mean over runs with finite intervals; absent when every run was
    /// unbounded.
    pub mean_mpiw: Option<f64>,
    pub flagged_runs: usize,
    pub unbounded_runs: usize,
    pub crossed_total: usize,
    /// Narrowest mean width among methods with no flagged or unbounded
    /// runs. Exact ties share the mark.
    pub best_width: bool,
}

/// All methods evaluated on one dataset at one confidence level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub dataset: String,
    pub confidence_level: f64,
    pub methods: Vec<MethodSummary>,
}

/// Groups records by dataset and confidence level (in first-appearance
/// order), averaging each method over its seeds.
pub fn summarize(records: &[BenchmarkRecord]) -> Vec<LevelSummary> {
    let mut levels: Vec<LevelSummary> = Vec::new();
    for record in records {
        let level = match levels.iter_mut().find(|l| {
            l.dataset == record.dataset && l.confidence_level == record.confidence_level
        }) {
            Some(level) => level,
            None => {
                levels.push(LevelSummary {
                    dataset: record.dataset.clone(),
                    confidence_level: record.confidence_level,
                    methods: Vec::new(),
                });
                levels.last_mut().unwrap()
            }
        };
        if !level.methods.iter().any(|m| m.method == record.method) {
            level.methods.push(MethodSummary {
                method: record.method.clone(),
                runs: 0,
                mean_picp: 0.0,
                mean_mpiw: None,
                flagged_runs: 0,
                unbounded_runs: 0,
                crossed_total: 0,
                best_width: false,
            });
        }
    }

    for level in &mut levels {
        for summary in &mut level.methods {
            let rows: Vec<&BenchmarkRecord> = records
                .iter()
                .filter(|r| {
                    r.dataset == level.dataset
                        && r.confidence_level == level.confidence_level
                        && r.method == summary.method
                })
                .collect();
            summary.runs = rows.len();
            summary.mean_picp =
                rows.iter().map(|r| r.picp).sum::<f64>() / rows.len() as f64;
            let widths: Vec<f64> = rows.iter().filter_map(|r| r.mpiw).collect();
            summary.mean_mpiw = if widths.is_empty() {
                None
            } else {
                Some(widths.iter().sum::<f64>() / widths.len() as f64)
            };
            summary.flagged_runs = rows
                .iter()
                .filter(|r| r.flags.coverage_deviation)
                .count();
            summary.unbounded_runs = rows
                .iter()
                .filter(|r| r.flags.unbounded_intervals)
                .count();
            summary.crossed_total =
                rows.iter().map(|r| r.flags.crossed_bounds).sum();
        }
        let best = level
            .methods
            .iter()
            .filter(|m| m.flagged_runs == 0 && m.unbounded_runs == 0)
            .filter_map(|m| m.mean_mpiw)
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            for summary in &mut level.methods {
                summary.best_width = summary.flagged_runs == 0
                    && summary.unbounded_runs == 0
                    && summary.mean_mpiw == Some(best);
            }
        }
    }
    levels
}

/// Fixed-width text table, one block per dataset and confidence level.
pub fn render_table(summaries: &[LevelSummary]) -> String {
    let mut out = String::new();
    for (i, level) in summaries.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "dataset {}, confidence level {:.2}",
            level.dataset, level.confidence_level
        );
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>7} {:>8}  notes",
            "method", "runs", "picp", "mpiw"
        );
        for m in &level.methods {
            let mpiw = match m.mean_mpiw {
                Some(w) => format!("{w:.3}"),
                None => "-".to_string(),
            };
            let mut notes = Vec::new();
            if m.best_width {
                notes.push("best width".to_string());
            }
            if m.flagged_runs > 0 {
                notes.push(format!("{} flagged", m.flagged_runs));
            }
            if m.unbounded_runs > 0 {
                notes.push(format!("{} unbounded", m.unbounded_runs));
            }
            if m.crossed_total > 0 {
                notes.push(format!("{} crossed", m.crossed_total));
            }
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>7.3} {:>8}  {}",
                m.method,
                m.runs,
                m.mean_picp,
                mpiw,
                notes.join(", ")
            );
        }
    }
    out
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn color_for(methods: &[String], method: &str) -> &'static str {
    let idx = methods.iter().position(|m| m == method).unwrap_or(0);
    PALETTE[idx % PALETTE.len()]
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        MARGIN_LEFT + (v - self.x_min) / (self.x_max - self.x_min) * w
    }

    fn y(&self, v: f64) -> f64 {
        let h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        MARGIN_TOP + (self.y_max - v) / (self.y_max - self.y_min) * h
    }
}

fn svg_header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" \
         height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">"
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + (SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / 2.0,
        escape_xml(title)
    );
}

fn svg_axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_LEFT;
    let x1 = SVG_WIDTH - MARGIN_RIGHT;
    let y0 = SVG_HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
        let px = frame.x(fx);
        let _ = writeln!(
            out,
            "<line x1=\"{px:.2}\" y1=\"{y0}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\
             <text x=\"{px:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{fx:.2}</text>",
            y0 + 5.0,
            y0 + 18.0
        );
        let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let py = frame.y(fy);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{x0}\" y2=\"{py:.2}\" stroke=\"black\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{fy:.3}</text>",
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + (SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / 2.0,
        SVG_HEIGHT - 12.0,
        escape_xml(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"18\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{}</text>",
        MARGIN_TOP + (SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0,
        MARGIN_TOP + (SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0,
        escape_xml(y_label)
    );
}

fn svg_legend(out: &mut String, names: &[String]) {
    let lx = SVG_WIDTH - MARGIN_RIGHT + 14.0;
    for (i, name) in names.iter().enumerate() {
        let ly = MARGIN_TOP + 10.0 + i as f64 * 20.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            ly - 9.0,
            lx + 15.0,
            ly,
            escape_xml(name)
        );
    }
}

/// Coverage against width, one point per run. Dashed horizontal lines mark
/// each nominal confidence level, and the embedded `<desc>` records every
/// run's seed and configuration fingerprint so the plot can be traced back
/// to the sweep that produced it.
pub fn render_scatter(records: &[BenchmarkRecord], title: &str) -> String {
    let points: Vec<(&BenchmarkRecord, f64)> = records
        .iter()
        .filter_map(|r| r.mpiw.map(|w| (r, w)))
        .collect();
    let mut methods: Vec<String> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut levels: Vec<f64> = Vec::new();
    for r in records {
        if !levels.contains(&r.confidence_level) {
            levels.push(r.confidence_level);
        }
    }

    let x_max = points
        .iter()
        .map(|&(_, w)| w)
        .fold(f64::NEG_INFINITY, f64::max);
    let x_max = if x_max.is_finite() { x_max * 1.05 } else { 1.0 };
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (r, _) in &points {
        y_lo = y_lo.min(r.picp);
        y_hi = y_hi.max(r.picp);
    }
    for &cl in &levels {
        y_lo = y_lo.min(cl);
        y_hi = y_hi.max(cl);
    }
    if !y_lo.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    let pad = ((y_hi - y_lo) * 0.15).max(0.02);
    let frame = Frame {
        x_min: 0.0,
        x_max: x_max.max(1e-9),
        y_min: y_lo - pad,
        y_max: y_hi + pad,
    };

    let mut out = String::new();
    svg_header(&mut out, title);
    let _ = writeln!(out, "<desc>");
    for r in records {
        let _ = writeln!(
            out,
            "method={} cl={} seed={} picp={} mpiw={} config={}",
            r.method,
            r.confidence_level,
            r.seed,
            r.picp,
            r.mpiw.map(|w| w.to_string()).unwrap_or_else(|| "unbounded".into()),
            r.config_fingerprint
        );
    }
    let _ = writeln!(out, "</desc>");
    svg_axes(&mut out, &frame, "MPIW", "PICP");

    for &cl in &levels {
        let py = frame.y(cl);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{:.2}\" y2=\"{py:.2}\" \
             stroke=\"gray\" stroke-dasharray=\"6 4\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"gray\">{cl:.2}</text>",
            MARGIN_LEFT,
            SVG_WIDTH - MARGIN_RIGHT,
            SVG_WIDTH - MARGIN_RIGHT + 4.0,
            py - 4.0
        );
    }

    for (r, w) in &points {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            frame.x(*w),
            frame.y(r.picp),
            color_for(&methods, &r.method)
        );
    }
    svg_legend(&mut out, &methods);
    out.push_str("</svg>\n");
    out
}

/// Line chart of one or more named series over a shared x axis, with an
/// optional dashed reference level.
pub fn render_lines(
    series: &[(String, Vec<(f64, f64)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
    reference: Option<f64>,
) -> String {
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, points) in series {
        for &(x, y) in points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if let Some(level) = reference {
        y_lo = y_lo.min(level);
        y_hi = y_hi.max(level);
    }
    if !x_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
    }
    if !y_lo.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if x_hi == x_lo {
        x_hi = x_lo + 1.0;
    }
    let pad = ((y_hi - y_lo) * 0.1).max(1e-9);
    let frame = Frame {
        x_min: x_lo,
        x_max: x_hi,
        y_min: y_lo - pad,
        y_max: y_hi + pad,
    };

    let mut out = String::new();
    svg_header(&mut out, title);
    svg_axes(&mut out, &frame, x_label, y_label);
    if let Some(level) = reference {
        let py = frame.y(level);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{:.2}\" y2=\"{py:.2}\" \
             stroke=\"gray\" stroke-dasharray=\"6 4\"/>",
            MARGIN_LEFT,
            SVG_WIDTH - MARGIN_RIGHT
        );
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    for (i, (_, points)) in series.iter().enumerate() {
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            coords.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    svg_legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}
