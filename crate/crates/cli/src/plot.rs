//! Learning-curve series and a small SVG line-chart writer.

use std::fmt::Write;

/// One line with an optional symmetric band (`mean ± spread`).
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub spread: Option<Vec<f64>>,
}

/// Exponential moving average for display (`decay` weight on the past).
pub fn ema(values: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc: Option<f64> = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => decay * a + (1.0 - decay) * v,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Value of a step function (last observation carried forward) at `x`.
fn carry(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    let idx = xs.partition_point(|&v| v <= x);
    (idx > 0).then(|| ys[idx - 1])
}

/// Mean and sample standard deviation across curves on a shared grid.
///
/// Curves are resampled by carrying the last value forward; grid points
/// before a curve's first sample are skipped for that curve.
pub fn aggregate(label: &str, curves: &[(Vec<f64>, Vec<f64>)], points: usize) -> Option<Series> {
    let lo = curves.iter().filter_map(|c| c.0.first()).cloned().fold(f64::INFINITY, f64::min);
    let hi = curves.iter().filter_map(|c| c.0.last()).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let grid: Vec<f64> = if curves.len() == 1 {
        curves[0].0.clone()
    } else if points < 2 || hi <= lo {
        vec![hi]
    } else {
        (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
    };
    let (mut x, mut mean, mut spread) = (Vec::new(), Vec::new(), Vec::new());
    for &g in &grid {
        let vals: Vec<f64> = curves.iter().filter_map(|(xs, ys)| carry(xs, ys, g)).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 { vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        x.push(g);
        mean.push(m);
        spread.push(var.sqrt());
    }
    Some(Series { label: label.to_string(), x, mean, spread: (curves.len() > 1).then_some(spread) })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Renders a line chart with shaded bands. Output depends only on the inputs.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let mut xs = series.iter().flat_map(|s| s.x.iter().cloned()).filter(|v| v.is_finite());
    let first = xs.next().unwrap_or(0.0);
    let (mut x0, mut x1) = xs.fold((first, first), |(a, b), v| (a.min(v), b.max(v)));
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for s in series {
        for (i, &m) in s.mean.iter().enumerate() {
            let sp = s.spread.as_ref().map_or(0.0, |v| v[i]);
            if m.is_finite() {
                y0 = y0.min(m - sp);
                y1 = y1.max(m + sp);
            }
        }
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(svg, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), top + ph + 18.0, tick(fx));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, sy(fy) + 4.0, tick(fy));
        let _ = writeln!(svg, r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, left + pw, sy(fy), sy(fy));
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> = s
            .x
            .iter()
            .zip(&s.mean)
            .enumerate()
            .filter(|(_, (x, m))| x.is_finite() && m.is_finite())
            .map(|(i, (&x, &m))| (x, m, s.spread.as_ref().map_or(0.0, |v| v[i])))
            .collect();
        if pts.is_empty() {
            continue;
        }
        if s.spread.is_some() {
            let mut d = String::new();
            for (i, &(x, m, sp)) in pts.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(m + sp));
            }
            for &(x, m, sp) in pts.iter().rev() {
                let _ = write!(d, "L{:.2},{:.2} ", sx(x), sy(m - sp));
            }
            let _ = writeln!(svg, r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, d);
        }
        let line: Vec<String> = pts.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#, line.join(" "));
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(svg, r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/>"#, w - right + 12.0, w - right + 32.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - right + 38.0, ly + 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
