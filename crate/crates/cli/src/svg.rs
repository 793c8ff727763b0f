//! Static SVG figures. Output depends only on the inputs: fixed-precision
//! numbers, no timestamps, provenance in a leading comment.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub enum Style {
    Line,
    /// Markers with symmetric error bars.
    Points(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub style: Style,
}

impl Series {
    pub fn line(label: &str, x: Vec<f64>, y: Vec<f64>) -> Self {
        Series { label: label.into(), x, y, style: Style::Line }
    }

    pub fn points(label: &str, x: Vec<f64>, y: Vec<f64>, err: Vec<f64>) -> Self {
        Series { label: label.into(), x, y, style: Style::Points(err) }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// XML comments may not contain `--`.
fn comment(s: &str) -> String {
    format!("<!--\n{}\n-->\n", s.replace("--", "- -"))
}

fn header(out: &mut String, provenance: &str, title: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    out.push_str(&comment(provenance));
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

/// Round tick step covering `span` with about five ticks.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    if v.abs() >= 1e5 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.decimals$}")
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(out, r#"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, r - l, b - t);
        let xs = tick_step(self.x1 - self.x0);
        let mut v = (self.x0 / xs).ceil() * xs;
        while v <= self.x1 + 1e-9 * xs {
            let x = self.px(v);
            let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{b:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, b + 5.0);
            let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, b + 18.0, fmt_tick(v, xs));
            v += xs;
        }
        let ys = tick_step(self.y1 - self.y0);
        let mut v = (self.y0 / ys).ceil() * ys;
        while v <= self.y1 + 1e-9 * ys {
            let y = self.py(v);
            let _ = writeln!(out, r#"<line x1="{:.1}" y1="{y:.1}" x2="{l:.1}" y2="{y:.1}" stroke="black"/>"#, l - 5.0);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 8.0, y + 4.0, fmt_tick(v, ys));
            v += ys;
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 12.0, escape(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn polyline(out: &mut String, f: &Frame, x: &[f64], y: &[f64], color: &str, width: f64) {
    // break the line at non-finite values
    let mut runs: Vec<Vec<String>> = vec![Vec::new()];
    for (&a, &b) in x.iter().zip(y) {
        if a.is_finite() && b.is_finite() {
            runs.last_mut().unwrap().push(format!("{:.2},{:.2}", f.px(a), f.py(b)));
        } else if !runs.last().unwrap().is_empty() {
            runs.push(Vec::new());
        }
    }
    for run in runs.into_iter().filter(|r| r.len() > 1) {
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#, run.join(" "));
    }
}

/// Line and marker plot.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], provenance: &str) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = range(series.iter().flat_map(|s| {
        let err = match &s.style {
            Style::Points(e) => e.clone(),
            Style::Line => vec![0.0; s.y.len()],
        };
        s.y.iter().zip(err).flat_map(|(&y, e)| [y - e, y + e]).collect::<Vec<_>>()
    }));
    let pad = 0.05 * (y1 - y0);
    let f = Frame { x0, x1, y0: y0 - pad, y1: y1 + pad };
    let mut out = String::new();
    header(&mut out, provenance, title);
    f.axes(&mut out, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        match &s.style {
            Style::Line => polyline(&mut out, &f, &s.x, &s.y, color, 1.5),
            Style::Points(err) => {
                for ((&x, &y), &e) in s.x.iter().zip(&s.y).zip(err) {
                    if !(x.is_finite() && y.is_finite()) {
                        continue;
                    }
                    let (px, py) = (f.px(x), f.py(y));
                    if e.is_finite() && e > 0.0 {
                        let _ = writeln!(
                            out,
                            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{color}"/>"#,
                            f.py(y - e),
                            f.py(y + e)
                        );
                    }
                    let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{color}"/>"#);
                }
            }
        }
        let ly = TOP + 16.0 + 16.0 * k as f64;
        let lx = W - RIGHT - 170.0;
        let _ = writeln!(out, r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="4" fill="{color}"/>"#, ly - 4.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 18.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

/// Grey-to-blue ramp on [0, 1].
fn shade(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(40.0, 250.0), lerp(40.0, 210.0), lerp(60.0, 90.0))
}

/// Values `values[i_y][i_x]` on the grid `x` by `y`.
pub struct Grid<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub values: &'a [Vec<f64>],
}

/// Density map with an overlay curve.
pub fn heat_map(title: &str, xlabel: &str, ylabel: &str, grid: &Grid, overlay: (&[f64], &[f64]), provenance: &str) -> String {
    let Grid { x, y, values } = *grid;
    let f = Frame { x0: x[0], x1: *x.last().unwrap(), y0: y[0], y1: *y.last().unwrap() };
    let mut out = String::new();
    header(&mut out, provenance, title);
    let half = |v: &[f64], i: usize| {
        let lo = if i == 0 { v[0] } else { 0.5 * (v[i - 1] + v[i]) };
        let hi = if i + 1 == v.len() { v[i] } else { 0.5 * (v[i] + v[i + 1]) };
        (lo, hi)
    };
    for (iy, row) in values.iter().enumerate() {
        let (ylo, yhi) = half(y, iy);
        for (ix, &v) in row.iter().enumerate() {
            let (xlo, xhi) = half(x, ix);
            let (px, py) = (f.px(xlo), f.py(yhi));
            let _ = writeln!(
                out,
                r#"<rect x="{px:.2}" y="{py:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                f.px(xhi) - px,
                f.py(ylo) - py,
                shade(v)
            );
        }
    }
    polyline(&mut out, &f, overlay.0, overlay.1, "white", 2.5);
    f.axes(&mut out, xlabel, ylabel);
    out.push_str("</svg>\n");
    out
}
