// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-written SVG line overlays and heatmaps. Every plotted point or cell
//! carries its exact value in a `data-value` attribute.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One named polyline.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Line chart with one polyline and marker set per series.
pub fn line_overlay(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if let Some(p) = all.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite(format!("plot point {p:?}")));
    }
    let (x0, x1) = span(
        all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = span(
        all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<title>{}</title>"#, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .unwrap();
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (v, y) in [(y0, b), (y1, t)] {
        writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{:.3}</text>"#,
            l - 4.0,
            v
        )
        .unwrap();
    }
    for (v, x) in [(x0, l), (x1, r)] {
        writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{v}</text>"#,
            b + 14.0
        )
        .unwrap();
    }
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let name = escape(&ser.name);
        writeln!(s, r#"<g class="series" data-series="{name}">"#).unwrap();
        let path: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                format!(
                    "{}{:.2} {:.2}",
                    if i == 0 { "M" } else { "L" },
                    px(x),
                    py(y)
                )
            })
            .collect();
        writeln!(
            s,
            r#"<path d="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            path.join(" ")
        )
        .unwrap();
        for &(x, y) in &ser.points {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-x="{x}" data-value="{y}"/>"#,
                px(x),
                py(y)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            r - 90.0,
            t + 14.0 * (k as f64 + 1.0)
        )
        .unwrap();
        writeln!(s, "</g>").unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grid heatmap of a matrix; white is the minimum, dark blue the maximum.
pub fn heatmap(title: &str, grid: &Tensor) -> Result<String> {
    if grid.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: grid.shape().to_vec(),
            reason: "heatmap expects a matrix".into(),
        });
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let lo = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let cell = 24.0;
    let (w, h) = (cols as f64 * cell + 20.0, rows as f64 * cell + 40.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<title>{}</title>"#, escape(title)).unwrap();
    writeln!(
        s,
        r#"<text x="10" y="20" font-size="12">{}</text>"#,
        escape(title)
    )
    .unwrap();
    for i in 0..rows {
        for j in 0..cols {
            let v = grid.get(i, j);
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{:02x}{:02x}{:02x}" data-row="{i}" data-col="{j}" data-value="{v}"/>"##,
                10.0 + j as f64 * cell,
                30.0 + i as f64 * cell,
                shade(8.0),
                shade(48.0),
                shade(107.0),
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}
