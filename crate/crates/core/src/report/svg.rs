//! Deterministic SVG renderers for matrices and 2-D scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::io_util::atomic_write;

pub const CELL: usize = 16;
const MARGIN_LEFT: usize = 56;
const MARGIN_TOP: usize = 40;
const LEGEND_GAP: usize = 24;
const LEGEND_WIDTH: usize = 14;
const LEGEND_STEPS: usize = 32;
const LEGEND_TICKS: usize = 5;

/// Colour ramp used for a heatmap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorScale {
    /// White at 0, blue for negative, red for positive; symmetric domain
    /// `[-M, M]` with `M` the largest magnitude.
    Diverging,
    /// White to dark blue over `[0, 1]`, or `[0, max]` if values exceed 1.
    Sequential,
    /// Sequential for data in `[0, 1]` with a positive maximum, diverging
    /// otherwise.
    Auto,
}

#[derive(Debug, Clone)]
pub struct HeatmapSpec<'a> {
    pub title: &'a str,
    pub row_labels: &'a [String],
    pub col_labels: &'a [String],
    pub scale: ColorScale,
}

const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const BLUE: [f64; 3] = [33.0, 102.0, 172.0];
const RED: [f64; 3] = [178.0, 24.0, 43.0];
const NAVY: [f64; 3] = [8.0, 48.0, 107.0];

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c: Vec<u8> = (0..3).map(|i| (a[i] + (b[i] - a[i]) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

#[derive(Debug, Clone, Copy)]
struct Domain {
    diverging: bool,
    lo: f64,
    hi: f64,
}

impl Domain {
    fn resolve(scale: ColorScale, values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let diverging = match scale {
            ColorScale::Diverging => true,
            ColorScale::Sequential => false,
            ColorScale::Auto => !(min >= 0.0 && max <= 1.0 && max > 0.0),
        };
        if diverging {
            let m = min.abs().max(max.abs());
            let m = if m > 0.0 { m } else { 1.0 };
            Self {
                diverging,
                lo: -m,
                hi: m,
            }
        } else {
            let hi = if max > 1.0 { max } else { 1.0 };
            Self { diverging, lo: 0.0, hi }
        }
    }

    fn color(&self, v: f64) -> String {
        if self.diverging {
            let t = v / self.hi;
            if t < 0.0 {
                mix(WHITE, BLUE, -t)
            } else {
                mix(WHITE, RED, t)
            }
        } else {
            mix(WHITE, NAVY, (v - self.lo) / (self.hi - self.lo))
        }
    }
}

/// Compact tick label: up to four decimals, trailing zeros dropped.
pub fn tick_label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders `matrix` as an SVG heatmap with a colour legend. Errors on
/// ragged rows, label count mismatches or non-finite entries.
pub fn heatmap_svg(matrix: &[Vec<f64>], spec: &HeatmapSpec<'_>) -> Result<String> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(LabError::Analysis("heatmap needs a non-empty matrix".into()));
    }
    if matrix.iter().any(|r| r.len() != cols) {
        return Err(LabError::Analysis("heatmap rows differ in length".into()));
    }
    if spec.row_labels.len() != rows || spec.col_labels.len() != cols {
        return Err(LabError::Analysis(format!(
            "heatmap is {rows}x{cols} but has {} row and {} column labels",
            spec.row_labels.len(),
            spec.col_labels.len()
        )));
    }
    if let Some((i, j)) = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .find(|&(i, j)| !matrix[i][j].is_finite())
    {
        return Err(LabError::NonFinite(format!("heatmap cell ({i}, {j})")));
    }
    let values: Vec<f64> = matrix.iter().flatten().copied().collect();
    let domain = Domain::resolve(spec.scale, &values);

    let grid_w = cols * CELL;
    let grid_h = rows * CELL;
    let legend_x = MARGIN_LEFT + grid_w + LEGEND_GAP;
    let width = legend_x + LEGEND_WIDTH + 56;
    let height = MARGIN_TOP + grid_h.max(120) + 16;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="9">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{MARGIN_LEFT}" y="14" font-size="12">{}</text>"#,
        escape(spec.title)
    )
    .unwrap();
    for (j, label) in spec.col_labels.iter().enumerate() {
        let x = MARGIN_LEFT + j * CELL + CELL / 2;
        let y = MARGIN_TOP - 4;
        writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="start" transform="rotate(-60 {x} {y})">{}</text>"#,
            escape(label)
        )
        .unwrap();
    }
    for (i, label) in spec.row_labels.iter().enumerate() {
        let y = MARGIN_TOP + i * CELL + CELL / 2 + 3;
        writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4,
            escape(label)
        )
        .unwrap();
    }
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{} / {}: {}</title></rect>"#,
                MARGIN_LEFT + j * CELL,
                MARGIN_TOP + i * CELL,
                domain.color(v),
                escape(&spec.row_labels[i]),
                escape(&spec.col_labels[j]),
                tick_label(v)
            )
            .unwrap();
        }
    }

    let legend_h = 120usize;
    let step_h = legend_h as f64 / LEGEND_STEPS as f64;
    for k in 0..LEGEND_STEPS {
        let t = 1.0 - (k as f64 + 0.5) / LEGEND_STEPS as f64;
        let v = domain.lo + t * (domain.hi - domain.lo);
        writeln!(
            s,
            r#"<rect x="{legend_x}" y="{:.2}" width="{LEGEND_WIDTH}" height="{:.2}" fill="{}"/>"#,
            MARGIN_TOP as f64 + k as f64 * step_h,
            step_h + 0.01,
            domain.color(v)
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<rect x="{legend_x}" y="{MARGIN_TOP}" width="{LEGEND_WIDTH}" height="{legend_h}" fill="none" stroke="#333333"/>"##
    )
    .unwrap();
    for k in 0..LEGEND_TICKS {
        let t = k as f64 / (LEGEND_TICKS - 1) as f64;
        let v = domain.hi - t * (domain.hi - domain.lo);
        let y = MARGIN_TOP as f64 + t * legend_h as f64;
        let x = legend_x + LEGEND_WIDTH;
        writeln!(
            s,
            r##"<line x1="{x}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#333333"/><text x="{}" y="{:.2}">{}</text>"##,
            x + 3,
            x + 5,
            y + 3.0,
            tick_label(v)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders and atomically writes a heatmap; nothing is written on error.
pub fn emit_heatmap_svg(matrix: &[Vec<f64>], spec: &HeatmapSpec<'_>, out: &Path) -> Result<()> {
    let svg = heatmap_svg(matrix, spec)?;
    atomic_write(out, svg.as_bytes())
}

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
const PLOT: f64 = 400.0;
const PAD: f64 = 40.0;

/// Labelled scatter plot. `groups` picks a palette colour per point;
/// `legend` names the groups in palette order.
pub fn scatter_svg(
    title: &str,
    points: &[[f64; 2]],
    labels: &[String],
    groups: &[usize],
    legend: &[String],
) -> Result<String> {
    if points.len() != labels.len() || points.len() != groups.len() {
        return Err(LabError::Analysis(
            "scatter points, labels and groups differ in length".into(),
        ));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("scatter coordinates".into()));
    }
    let span = |d: usize| {
        let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        if points.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let ((x0, x1), (y0, y1)) = (span(0), span(1));
    let width = PLOT + 2.0 * PAD + 140.0;
    let height = PLOT + 2.0 * PAD;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="8">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##).unwrap();
    writeln!(s, r#"<text x="{PAD}" y="20" font-size="12">{}</text>"#, escape(title)).unwrap();
    writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{PLOT}" height="{PLOT}" fill="none" stroke="#999999"/>"##
    )
    .unwrap();
    for ((p, label), &g) in points.iter().zip(labels).zip(groups) {
        let x = PAD + (p[0] - x0) / (x1 - x0) * PLOT;
        let y = PAD + PLOT - (p[1] - y0) / (y1 - y0) * PLOT;
        writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            PALETTE[g % PALETTE.len()],
            x + 5.0,
            y - 3.0,
            escape(label)
        )
        .unwrap();
    }
    for (g, name) in legend.iter().enumerate() {
        let y = PAD + 12.0 + g as f64 * 16.0;
        let x = PAD + PLOT + 16.0;
        writeln!(
            s,
            r#"<circle cx="{x}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}" font-size="10">{}</text>"#,
            PALETTE[g % PALETTE.len()],
            x + 8.0,
            y + 3.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
