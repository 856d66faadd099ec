//! Minimal static line charts: one polyline over a labeled grid, no
//! dependencies. Good enough for survival/recall-over-time plots.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

pub fn line_chart(title: &str, points: &[(u64, f64)]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(
        out,
        r#"<rect width="{W}" height="{H}" fill="white" stroke="none"/>"#
    );

    let x_max = points.iter().map(|(t, _)| *t).max().unwrap_or(1).max(1) as f64;
    let y_max = points
        .iter()
        .map(|(_, v)| *v)
        .fold(0.0f64, f64::max)
        .max(1.0);

    let px = |t: f64| MARGIN + (W - 2.0 * MARGIN) * t / x_max;
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v / y_max;

    // Axes and gridlines.
    let _ = write!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = py(v);
        let _ = write!(
            out,
            r##"<line x1="{m}" y1="{y:.1}" x2="{r}" y2="{y:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" font-size="11" text-anchor="end">{v:.2}</text>"##,
            m = MARGIN,
            r = W - MARGIN,
            tx = MARGIN - 6.0,
            ty = y + 4.0
        );
        let t = x_max * i as f64 / 4.0;
        let x = px(t);
        let _ = write!(
            out,
            r#"<text x="{x:.1}" y="{ty}" font-size="11" text-anchor="middle">{t:.0}</text>"#,
            ty = H - MARGIN + 16.0
        );
    }
    let _ = write!(
        out,
        r#"<text x="{cx}" y="20" font-size="14" text-anchor="middle">{title} over time</text>"#,
        cx = W / 2.0
    );

    // Step polyline: series values hold until the next point.
    if !points.is_empty() {
        let mut d = String::new();
        let mut prev_y = py(points[0].1);
        let _ = write!(d, "M {:.1} {:.1}", px(points[0].0 as f64), prev_y);
        for (t, v) in points.iter().skip(1) {
            let x = px(*t as f64);
            let y = py(*v);
            let _ = write!(d, " L {x:.1} {prev_y:.1} L {x:.1} {y:.1}");
            prev_y = y;
        }
        let _ = write!(
            out,
            r##"<path d="{d}" fill="none" stroke="#1f77b4" stroke-width="1.8"/>"##
        );
    }
    out.push_str("</svg>\n");
    out
}
