//! Minimal SVG line charts of metrics columns against `step`.

use super::metrics::{unknown_column, MetricsRow, COLUMNS};
use crate::error::{Error, Result};
use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Renders one polyline per requested column. Rows where a column is absent
/// leave a gap in that column's line.
pub fn render_plot(rows: &[MetricsRow], columns: &[&str], title: &str) -> Result<String> {
    if columns.is_empty() {
        return Err(Error::Usage {
            field: "columns".into(),
            message: "name at least one column".into(),
        });
    }
    if let Some(bad) = columns.iter().find(|c| !COLUMNS.contains(c)) {
        return Err(unknown_column(bad));
    }
    let series: Vec<Vec<(f64, f64)>> = columns
        .iter()
        .map(|c| {
            rows.iter()
                .filter_map(|r| {
                    r.get(c)
                        .ok()
                        .flatten()
                        .filter(|v| v.is_finite())
                        .map(|v| (r.step as f64, v))
                })
                .collect()
        })
        .collect();
    let (x0, x1) = extent(rows.iter().map(|r| r.step as f64));
    let (y0, y1) = extent(series.iter().flatten().map(|p| p.1));
    let (ml, mr, mt, mb) = MARGIN;
    let pw = WIDTH - ml - mr;
    let ph = HEIGHT - mt - mb;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{ml}" y1="{}" x2="{}" y2="{}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}"/></g>"#,
        mt + ph,
        ml + pw,
        mt + ph,
        mt + ph
    );
    for k in 0..=4 {
        let f = f64::from(k) / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            mt + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        ml + pw / 2.0,
        HEIGHT - 10.0
    );
    for (i, (name, pts)) in columns.iter().zip(&series).enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-column="{name}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
    }
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, name) in columns.iter().enumerate() {
        let y = mt + 12.0 + 16.0 * i as f64;
        let x = ml + pw - 150.0;
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="14" height="3" fill="{colour}"/><text x="{}" y="{y}">{name}</text>"#,
            y - 4.0,
            x + 20.0
        );
    }
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
