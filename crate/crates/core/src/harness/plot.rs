//! Accuracy against deleted segments as a standalone SVG line chart. Blue
//! is the plain network; thresholds are shades of red, lighter for lower T.

use std::fmt::Write;

use super::records::{AccuracyRecord, Mode};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;

fn series(records: &[AccuracyRecord], mode: Mode) -> Vec<(usize, f64)> {
    let mut pts: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| r.mode == mode)
        .map(|r| (r.s, 100.0 * r.accuracy()))
        .collect();
    pts.sort_by_key(|p| p.0);
    pts
}

fn red_shade(t: f64, lo: f64, hi: f64) -> String {
    let f = if hi > lo { (t - lo) / (hi - lo) } else { 1.0 };
    // from pale pink at the lowest threshold to full red at the highest
    let fade = (200.0 * (1.0 - f)).round() as u8;
    format!("rgb(220,{fade},{fade})")
}

pub fn render_svg(records: &[AccuracyRecord]) -> String {
    let s_max = records.iter().map(|r| r.s).max().unwrap_or(1).max(1);
    let mut thresholds: Vec<f64> = records
        .iter()
        .filter_map(|r| match r.mode {
            Mode::Threshold(t) => Some(t),
            Mode::NoIntuition => None,
        })
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |s: usize| LEFT + plot_w * s as f64 / s_max as f64;
    let y = |acc: f64| TOP + plot_h * (1.0 - acc / 100.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            ty + 4.0
        );
    }
    for s in 0..=s_max {
        let tx = x(s);
        let _ = writeln!(
            svg,
            r#"<text x="{tx:.1}" y="{:.1}" text-anchor="middle">{s}</text>"#,
            TOP + plot_h + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">deleted segments s</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    let (lo, hi) = (
        thresholds.first().copied().unwrap_or(0.0),
        thresholds.last().copied().unwrap_or(1.0),
    );
    let mut lines: Vec<(String, String, Vec<(usize, f64)>)> = thresholds
        .iter()
        .map(|&t| (format!("T = {t}"), red_shade(t, lo, hi), series(records, Mode::Threshold(t))))
        .collect();
    lines.push(("no intuition".into(), "rgb(30,90,220)".into(), series(records, Mode::NoIntuition)));

    for (i, (label, colour, pts)) in lines.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|&(s, a)| format!("{:.1},{:.1}", x(s), y(a))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.8" points="{}"/>"#,
            path.join(" ")
        );
        let ly = TOP + 14.0 * i as f64 + 8.0;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
