//! Validation-EER-versus-epoch curves as a standalone SVG.

use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::training::EpochRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    /// `(epoch, value)` points in epoch order.
    pub points: Vec<(f64, f64)>,
}

/// Reads a metrics log (one JSON record per line).
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn eer_curve(label: &str, records: &[EpochRecord]) -> Curve {
    Curve {
        label: label.to_string(),
        points: records
            .iter()
            .filter_map(|r| r.val_eer.map(|e| (r.epoch as f64, e * 100.0)))
            .collect(),
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn nice_step(range: f64, ticks: usize) -> f64 {
    let raw = range / ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Renders the curves on shared axes.
pub fn render_svg(curves: &[Curve], title: &str, y_label: &str) -> Result<String> {
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::InvalidInput("nothing to plot: no points in any curve".into()));
    }
    let (w, h) = (720.0, 440.0);
    let (l, r, t, b) = (70.0, 170.0, 40.0, 60.0);
    let x_max = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_top = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let y_step = nice_step(y_top, 5);
    let y_max = (y_top / y_step).ceil() * y_step;
    let x_step = nice_step(x_max, 8).max(1.0);
    let sx = |x: f64| l + x / x_max * (w - l - r);
    let sy = |y: f64| h - b - y / y_max * (h - t - b);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (l + w - r) / 2.0,
        escape(title)
    );
    let mut y = 0.0;
    while y <= y_max + 1e-9 {
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{l}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            w - r,
            l - 6.0,
            py + 4.0,
            trim_number(y)
        );
        y += y_step;
    }
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let px = sx(x);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#000"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            h - b,
            h - b + 5.0,
            h - b + 20.0,
            trim_number(x)
        );
        x += x_step;
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{l},{t} {l},{} {},{}" fill="none" stroke="#000"/>"##,
        h - b,
        w - r,
        h - b
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        (l + w - r) / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(20,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = t + 20.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - r + 12.0,
            w - r + 36.0,
            w - r + 42.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
