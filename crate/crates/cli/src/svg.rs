//! Minimal SVG line plot for RUB profiles: 800×500, axes, a ±1 std band, the
//! mean curve and the ideal level.

use std::fmt::Write;

const W: f64 = 800.0;
const H: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub struct Profile<'a> {
    pub title: &'a str,
    pub x: &'a [f64],
    pub mean: &'a [f64],
    pub spread: &'a [f64],
    pub ideal: f64,
}

fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * p).find(|c| *c >= v).unwrap_or(10.0 * p)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(p: &Profile) -> String {
    let x_max = p.x.iter().copied().fold(0.0, f64::max).max(1e-12);
    let top = p.mean.iter().zip(p.spread).map(|(m, s)| m + s).fold(p.ideal, f64::max);
    let y_max = nice_ceiling(top * 1.05);
    let sx = |x: f64| LEFT + x / x_max * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - y.max(0.0) / y_max * (H - TOP - BOTTOM);
    let pts = |ys: &[f64]| -> Vec<String> { p.x.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect() };

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="500" viewBox="0 0 800 500">"#);
    let _ = writeln!(out, r#"<rect x="0" y="0" width="800" height="500" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="400" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, escape(p.title));
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let xv = x_max * k as f64 / 5.0;
        let yv = y_max * k as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{:.2}</text>"#,
            sx(xv),
            y0 + 18.0,
            xv
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="12">{:.3}</text>"#,
            x0 - 6.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13">radius</text>"#, (x0 + x1) / 2.0, H - 16.0);
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {:.2})">std</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let upper: Vec<f64> = p.mean.iter().zip(p.spread).map(|(m, s)| m + s).collect();
    let lower: Vec<f64> = p.mean.iter().zip(p.spread).map(|(m, s)| m - s).collect();
    let mut band = pts(&upper);
    band.extend(pts(&lower).into_iter().rev());
    let _ = writeln!(out, r##"<path id="band" d="M{}Z" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##, band.join("L"));
    let _ = writeln!(out, r##"<path id="mean" d="M{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts(p.mean).join("L"));
    let _ = writeln!(
        out,
        r##"<path id="ideal" d="M{:.2},{:.2}L{:.2},{:.2}" fill="none" stroke="#d62728" stroke-dasharray="6,4"/>"##,
        sx(0.0),
        sy(p.ideal),
        sx(x_max),
        sy(p.ideal)
    );
    out.push_str("</svg>\n");
    out
}
