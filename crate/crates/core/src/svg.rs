//! Minimal SVG line plots for per-frame traces.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per named series; x is the sample index. Non-finite samples
/// are skipped.
pub fn line_plot(title: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    let finite = || series.iter().flat_map(|(_, ys)| ys.iter().copied()).filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = finite().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let len = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0).max(2);
    let sx = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (len - 1) as f64;
    let sy = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="10">{hi:.4}</text>"#,
        y1 - 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{y0}" font-family="sans-serif" font-size="10">{lo:.4}</text>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">frame</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let a = [0.0, 1.0, 0.5];
        let b = [2.0, f64::NAN, 1.0];
        let svg = line_plot("err <m>", "m", &[("online", &a), ("offline", &b)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("err &lt;m&gt;"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn flat_and_empty_series_render() {
        let svg = line_plot("flat", "m", &[("a", &[1.0, 1.0])]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let svg = line_plot("empty", "m", &[]);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }
}
