//! Minimal static SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 64.0;
const MR: f64 = 24.0;
const MT: f64 = 36.0;
const MB: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal reference lines `(y, label)`.
    pub hlines: Vec<(f64, String)>,
    /// Marked points `(x, y, label)`.
    pub marks: Vec<(f64, f64, String)>,
    pub y_range: Option<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
}

impl LineChart {
    pub fn render(&self) -> String {
        let (x0, x1) = extent(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            extent(
                self.series
                    .iter()
                    .flat_map(|s| s.points.iter().map(|p| p.1))
                    .chain(self.hlines.iter().map(|h| h.0)),
            )
        });
        let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
        let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
        let mut out = String::new();
        header(&mut out, &self.title);
        let _ = writeln!(
            out,
            r#"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            W - ML - MR,
            H - MT - MB
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(xv),
                H - MB + 16.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                ML - 6.0,
                py(yv) + 4.0,
                fmt_tick(yv)
            );
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ML + W - MR) / 2.0, H - 10.0, esc(&self.x_label));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (MT + H - MB) / 2.0,
            esc(&self.y_label)
        );
        for (y, label) in &self.hlines {
            let (x2, yy, tx) = (W - MR, py(*y), W - MR - 4.0);
            let _ = writeln!(
                out,
                r##"<line x1="{ML}" x2="{x2}" y1="{yy:.1}" y2="{yy:.1}" stroke="#888" stroke-dasharray="4 3"/><text x="{tx}" y="{:.1}" text-anchor="end" fill="#555">{}</text>"##,
                yy - 4.0,
                esc(label)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y.clamp(y0, y1))))
                .collect();
            let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                ML + 8.0,
                MT + 16.0 + 14.0 * i as f64,
                esc(&s.label)
            );
        }
        for (x, y, label) in &self.marks {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="black"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                px(*x),
                py(*y),
                px(*x) + 6.0,
                py(*y) - 6.0,
                esc(label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Grouped bar chart: one group per row, one bar per column.
pub fn bar_chart(title: &str, columns: &[&str], rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let n_groups = rows.len().max(1) as f64;
    let group_w = (W - ML - MR) / n_groups;
    let bar_w = group_w * 0.8 / columns.len().max(1) as f64;
    let base = H - MB;
    let py = |v: f64| base - v.clamp(0.0, 1.0) * (H - MT - MB);
    let _ = writeln!(out, r#"<line x1="{ML}" x2="{}" y1="{base}" y2="{base}" stroke="black"/>"#, W - MR);
    for (g, (name, vals)) in rows.iter().enumerate() {
        let gx = ML + g as f64 * group_w + group_w * 0.1;
        for (k, v) in vals.iter().enumerate() {
            let x = gx + k as f64 * bar_w;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.2}</text>"#,
                py(*v),
                bar_w * 0.9,
                base - py(*v),
                COLORS[k % COLORS.len()],
                x + bar_w * 0.45,
                py(*v) - 3.0
            );
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + group_w * 0.4, base + 16.0, esc(name));
    }
    for (k, c) in columns.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{}">{}</text>"#, W - MR - 60.0, MT + 14.0 * (k + 1) as f64, COLORS[k % COLORS.len()], esc(c));
    }
    out.push_str("</svg>\n");
    out
}
