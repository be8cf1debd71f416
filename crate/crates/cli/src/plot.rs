//! Minimal SVG line charts for error curves.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Plot each series against its 1-based step index. A dashed vertical line
/// marks the end of the observed steps when `split` is given.
pub fn line_chart(title: &str, y_label: &str, series: &[(&str, &[f64])], split: Option<usize>) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let ymax = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12) * 1.05;
    let px = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v / ymax);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - MARGIN, W - MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>"#, H - MARGIN);
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, py(v) + 4.0, v);
    }
    for i in 0..n {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(i), H - MARGIN + 16.0, i + 1);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, escape(y_label));
    if let Some(t) = split {
        if t > 0 && t < n {
            let x = (px(t - 1) + px(t)) / 2.0;
            let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{MARGIN}" x2="{x:.1}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#, H - MARGIN);
        }
    }
    for (j, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let pts: Vec<String> = values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| format!("{:.1},{:.1}", px(i), py(*v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = MARGIN + 16.0 * j as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - MARGIN - 150.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
