//! Minimal SVG line and box plots. CSV files stay the authoritative output;
//! these are for a quick look.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot `log10(y)`; non-positive values are dropped.
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title),
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn axes(svg: &mut String, f: &Frame, y_tick: impl Fn(f64) -> String, x_ticks: bool) {
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let y = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 5.0, f.py(y) + 4.0, y_tick(y));
        if x_ticks {
            let x = f.x.0 + t * (f.x.1 - f.x.0);
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, f.px(x), H - BOTTOM + 16.0, fmt_tick(x));
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let tf = |y: f64| if self.log_y { (y > 0.0).then(|| y.log10()) } else { Some(y) };
        let pts: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| s.points.iter().filter(|p| p.0.is_finite()).filter_map(|&(x, y)| tf(y).filter(|v| v.is_finite()).map(|v| (x, v))).collect())
            .collect();
        let f = Frame { x: range(pts.iter().flatten().map(|p| p.0)), y: range(pts.iter().flatten().map(|p| p.1)) };
        let mut svg = String::new();
        header(&mut svg, &self.title, &self.x_label, &self.y_label);
        let log = self.log_y;
        axes(&mut svg, &f, |y| if log { format!("1e{y:.1}") } else { fmt_tick(y) }, true);
        for (i, (s, p)) in self.series.iter().zip(&pts).enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            let ly = TOP + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                W - RIGHT + 10.0,
                W - RIGHT + 30.0,
                W - RIGHT + 35.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Five-number summary boxes, one per group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoxPlot {
    pub title: String,
    pub y_label: String,
    pub log_y: bool,
    pub groups: Vec<(String, Vec<f64>)>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

impl BoxPlot {
    pub fn to_svg(&self) -> String {
        let data: Vec<Vec<f64>> = self
            .groups
            .iter()
            .map(|(_, v)| {
                let mut v: Vec<f64> =
                    v.iter().filter_map(|&y| if self.log_y { (y > 0.0).then(|| y.log10()) } else { Some(y) }).filter(|y| y.is_finite()).collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        let n = self.groups.len().max(1) as f64;
        let f = Frame { x: (0.0, n), y: range(data.iter().flatten().copied()) };
        let mut svg = String::new();
        header(&mut svg, &self.title, "", &self.y_label);
        let log = self.log_y;
        axes(&mut svg, &f, |y| if log { format!("1e{y:.1}") } else { fmt_tick(y) }, false);
        let half = 0.3 * (f.px(1.0) - f.px(0.0));
        for (i, ((name, _), v)) in self.groups.iter().zip(&data).enumerate() {
            let cx = f.px(i as f64 + 0.5);
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(svg, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 16.0, escape(name));
            if v.is_empty() {
                continue;
            }
            let [lo, q1, med, q3, hi] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| f.py(quantile(v, q)));
            let _ = writeln!(
                svg,
                r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>
<rect x="{:.1}" y="{q3:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.4" stroke="black"/>
<line x1="{:.1}" y1="{med:.1}" x2="{:.1}" y2="{med:.1}" stroke="black" stroke-width="2"/>"#,
                cx - half,
                2.0 * half,
                (q1 - q3).max(0.5),
                cx - half,
                cx + half
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

pub fn write_svg(svg: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
