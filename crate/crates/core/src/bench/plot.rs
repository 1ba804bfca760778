use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::sweep::{read_aggregate_csv, AggregateRow};
use crate::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Data-to-pixel mapping of the plot area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axes {
    pub x_min: f64,
    pub x_max: f64,
    /// Top of the y range, in percent.
    pub y_max: f64,
    pub log_x: bool,
}

impl Axes {
    fn fit(rows: &[AggregateRow]) -> Self {
        let xs = rows.iter().map(|r| r.n_labeled as f64);
        let x_min = xs.clone().fold(f64::INFINITY, f64::min);
        let x_max = xs.fold(f64::NEG_INFINITY, f64::max);
        let top = rows
            .iter()
            .map(|r| 100.0 * (r.mean_error + r.std_error))
            .fold(0.0, f64::max);
        Self {
            x_min,
            x_max,
            y_max: nice_ceiling(top * 1.05),
            log_x: x_min > 0.0 && x_max / x_min >= 8.0,
        }
    }

    pub fn x_px(&self, n: f64) -> f64 {
        let t = if self.x_max == self.x_min {
            0.5
        } else if self.log_x {
            (n.ln() - self.x_min.ln()) / (self.x_max.ln() - self.x_min.ln())
        } else {
            (n - self.x_min) / (self.x_max - self.x_min)
        };
        LEFT + t * (WIDTH - LEFT - RIGHT)
    }

    /// Pixel row of an error given as a fraction.
    pub fn y_px(&self, error: f64) -> f64 {
        let pct = 100.0 * error;
        HEIGHT - BOTTOM - pct / self.y_max * (HEIGHT - TOP - BOTTOM)
    }
}

/// Smallest of 1, 2, 2.5, 5 × 10^k that is ≥ `v`.
fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let base = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * base)
        .find(|&c| c >= v)
        .unwrap_or(10.0 * base)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG document with one line per method over `n_labeled` and a ±1 std band.
pub fn render_svg(rows: &[AggregateRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Format("no aggregate rows to plot".into()));
    }
    let axes = Axes::fit(rows);
    let mut by_method: BTreeMap<String, Vec<&AggregateRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(r.method.to_string()).or_default().push(r);
    }
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#).ok();
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .ok();
    writeln!(
        w,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .ok();
    writeln!(
        w,
        r#"<g id="plot" data-x-min="{}" data-x-max="{}" data-y-max="{}" data-x-scale="{}" font-family="sans-serif" font-size="12">"#,
        axes.x_min,
        axes.x_max,
        axes.y_max,
        if axes.log_x { "log" } else { "linear" }
    )
    .ok();

    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    writeln!(
        w,
        r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    )
    .ok();
    writeln!(
        w,
        r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    )
    .ok();
    let ticks: BTreeSet<usize> = rows.iter().map(|r| r.n_labeled).collect();
    for &n in &ticks {
        let x = axes.x_px(n as f64);
        writeln!(
            w,
            r#"<line x1="{x:.3}" y1="{y0}" x2="{x:.3}" y2="{}" stroke="black"/>"#,
            y0 + 5.0
        )
        .ok();
        writeln!(
            w,
            r#"<text x="{x:.3}" y="{}" text-anchor="middle">{n}</text>"#,
            y0 + 20.0
        )
        .ok();
    }
    for i in 0..=5 {
        let pct = axes.y_max * i as f64 / 5.0;
        let y = axes.y_px(pct / 100.0);
        writeln!(
            w,
            r#"<line x1="{}" y1="{y:.3}" x2="{x0}" y2="{y:.3}" stroke="black"/>"#,
            x0 - 5.0
        )
        .ok();
        writeln!(
            w,
            r#"<text x="{}" y="{:.3}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            y + 4.0,
            fmt_tick(pct)
        )
        .ok();
    }
    writeln!(
        w,
        r#"<text class="axis-label" x="{:.3}" y="{}" text-anchor="middle">labeled examples</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0
    )
    .ok();
    writeln!(
        w,
        r#"<text class="axis-label" x="20" y="{0:.3}" text-anchor="middle" transform="rotate(-90 20 {0:.3})">test error (%)</text>"#,
        (y0 + y1) / 2.0
    )
    .ok();

    for (i, (method, mut points)) in by_method.into_iter().enumerate() {
        points.sort_by_key(|r| r.n_labeled);
        let color = PALETTE[i % PALETTE.len()];
        let name = escape(&method);
        let upper = points
            .iter()
            .map(|r| (axes.x_px(r.n_labeled as f64), axes.y_px(r.mean_error + r.std_error)));
        let lower = points
            .iter()
            .rev()
            .map(|r| (axes.x_px(r.n_labeled as f64), axes.y_px(r.mean_error - r.std_error)));
        writeln!(
            w,
            r#"<polygon class="band" data-method="{name}" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            coords(upper.chain(lower))
        )
        .ok();
        let line = points
            .iter()
            .map(|r| (axes.x_px(r.n_labeled as f64), axes.y_px(r.mean_error)));
        writeln!(
            w,
            r#"<polyline class="curve" data-method="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords(line)
        )
        .ok();
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 20.0;
        writeln!(w, r#"<g class="legend-entry">"#).ok();
        writeln!(
            w,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        )
        .ok();
        writeln!(w, r#"<text x="{}" y="{}">{name}</text>"#, lx + 26.0, ly + 4.0).ok();
        writeln!(w, "</g>").ok();
    }
    writeln!(w, "</g>").ok();
    writeln!(w, "</svg>").ok();
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn coords(points: impl Iterator<Item = (f64, f64)>) -> String {
    points
        .map(|(x, y)| format!("{x:.3},{y:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads an aggregate CSV and writes the learning-curve SVG.
pub fn plot_curves(csv_path: impl AsRef<Path>, svg_path: impl AsRef<Path>) -> Result<()> {
    let rows = read_aggregate_csv(csv_path)?;
    let svg = render_svg(&rows)?;
    let path = svg_path.as_ref();
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
