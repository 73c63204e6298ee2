//! Learning-curve figures as standalone SVG, one curve per variant with an
//! across-seed spread band, plus the underlying data as JSON so the figure
//! can be regenerated exactly.

use crate::{RunRecord, Variant};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub variant: String,
    pub epochs: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub metric: String,
    pub curves: Vec<CurveData>,
}

/// Across-seed mean and spread of episode reward per epoch, per variant.
pub fn curve_data(records: &[RunRecord]) -> PlotData {
    let mut curves = Vec::new();
    for variant in Variant::all() {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.variant == variant).collect();
        if runs.is_empty() {
            continue;
        }
        let n_epochs = runs.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
        let mut mean = Vec::with_capacity(n_epochs);
        let mut std = Vec::with_capacity(n_epochs);
        for e in 0..n_epochs {
            let vals: Vec<f64> = runs.iter().map(|r| r.epochs[e].reward).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            mean.push(m);
            std.push(v.sqrt());
        }
        curves.push(CurveData {
            variant: variant.name().to_string(),
            epochs: (0..n_epochs).collect(),
            mean,
            std,
            n_runs: runs.len(),
        });
    }
    PlotData {
        metric: "episode_reward".to_string(),
        curves,
    }
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 760.0;
const H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

/// Render the curves into a self-contained SVG document.
pub fn render_svg(data: &PlotData) -> String {
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut x_max = 1.0f64;
    for c in &data.curves {
        for (m, s) in c.mean.iter().zip(&c.std) {
            y_min = y_min.min(m - s);
            y_max = y_max.max(m + s);
        }
        x_max = x_max.max(c.epochs.len().saturating_sub(1) as f64);
    }
    if !y_min.is_finite() || !y_max.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let px = |e: f64| MARGIN_L + (W - MARGIN_L - MARGIN_R) * (e / x_max.max(1.0));
    let py = |v: f64| MARGIN_T + (H - MARGIN_T - MARGIN_B) * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);

    // axes
    let x0 = MARGIN_L;
    let y0 = H - MARGIN_B;
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{MARGIN_T}" x2="{x0}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        W - MARGIN_R
    );
    // ticks
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let yv = y_min + frac * (y_max - y_min);
        let yy = py(yv);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{yy}" x2="{x0}" y2="{yy}" stroke="black"/>"#,
            x0 - 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{yv:.1}</text>"#,
            x0 - 8.0,
            yy + 4.0
        );
        let xv = frac * x_max;
        let xx = px(xv);
        let _ = writeln!(
            svg,
            r#"<line x1="{xx}" y1="{y0}" x2="{xx}" y2="{}" stroke="black"/>"#,
            y0 + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{xx}" y="{}" font-size="11" text-anchor="middle">{xv:.0}</text>"#,
            y0 + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#,
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">episode reward</text>"#,
        (MARGIN_T + y0) / 2.0,
        (MARGIN_T + y0) / 2.0
    );

    for (ci, curve) in data.curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        if curve.mean.is_empty() {
            continue;
        }
        // spread band
        let mut band = String::new();
        for (e, (m, s)) in curve.mean.iter().zip(&curve.std).enumerate() {
            let _ = write!(band, "{},{} ", px(e as f64), py(m + s));
        }
        for (e, (m, s)) in curve.mean.iter().zip(&curve.std).enumerate().rev() {
            let _ = write!(band, "{},{} ", px(e as f64), py(m - s));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" opacity="0.15"/>"#,
            band.trim_end()
        );
        // mean line
        let mut line = String::new();
        for (e, m) in curve.mean.iter().enumerate() {
            let _ = write!(line, "{},{} ", px(e as f64), py(*m));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            line.trim_end()
        );
        // legend
        let ly = MARGIN_T + 16.0 * ci as f64 + 4.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            MARGIN_L + 10.0,
            MARGIN_L + 34.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11">{} (n={})</text>"#,
            MARGIN_L + 40.0,
            ly + 4.0,
            curve.variant,
            curve.n_runs
        );
    }
    let _ = writeln!(svg, "</svg>");
    svg
}
