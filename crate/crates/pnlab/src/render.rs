use std::fmt::Write as _;
use std::path::Path;

use pnlab_core::Field;

const PLOT_W: f64 = 300.0;
const PLOT_H: f64 = 600.0;
const MARGIN: f64 = 40.0;
const LEGEND_W: f64 = 170.0;

// Dark blue to yellow.
const PALETTE: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn color(s: f64) -> String {
    let s = s.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let k = (s.floor() as usize).min(PALETTE.len() - 2);
    let w = s - k as f64;
    let (a, b) = (PALETTE[k], PALETTE[k + 1]);
    let mix = |x: f64, y: f64| ((1.0 - w) * x + w * y).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// SVG heatmap of `field` with `x1` to the right and `x2` upward, so the
/// Neumann face is the left edge. `contact` lists `x2` intervals to mark on
/// the face.
pub fn heatmap_svg(field: &Field, contact: &[(f64, f64)]) -> String {
    let g = field.grid();
    let vals = field.values();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (cw, ch) = (PLOT_W * g.hx(), PLOT_H * g.hy() / 2.0);
    let px = |x1: f64| MARGIN + PLOT_W * x1;
    let py = |x2: f64| MARGIN + PLOT_H * (1.0 - x2) / 2.0;
    let width = 2.0 * MARGIN + PLOT_W + LEGEND_W;
    let height = 2.0 * MARGIN + PLOT_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<clipPath id="domain"><rect x="{MARGIN}" y="{MARGIN}" width="{PLOT_W}" height="{PLOT_H}"/></clipPath>"#
    );
    let _ = writeln!(s, r#"<g clip-path="url(#domain)" shape-rendering="crispEdges">"#);
    for (n, &v) in vals.iter().enumerate() {
        let (x1, x2) = g.coords(n);
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
            px(x1) - cw / 2.0,
            py(x2) - ch / 2.0,
            cw,
            ch,
            color(t)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="black"/>"#
    );
    for &(a, b) in contact {
        let _ = writeln!(
            s,
            r#"<line class="contact" x1="{m:.3}" y1="{:.3}" x2="{m:.3}" y2="{:.3}" stroke="red" stroke-width="5"/>"#,
            py(b) - ch / 2.0,
            py(a) + ch / 2.0,
            m = MARGIN - 3.0
        );
    }

    let lx = MARGIN + PLOT_W + 30.0;
    let bar_h = 200.0;
    for k in 0..50 {
        let t = 1.0 - k as f64 / 49.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{:.3}" width="20" height="{:.3}" fill="{}"/>"#,
            MARGIN + bar_h * k as f64 / 50.0,
            bar_h / 50.0 + 0.5,
            color(t)
        );
    }
    let text = |s: &mut String, y: f64, body: String| {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-family="monospace" font-size="12">{body}</text>"#, lx + 28.0);
    };
    text(&mut s, MARGIN + 10.0, format!("max = {hi:.6e}"));
    text(&mut s, MARGIN + bar_h, format!("min = {lo:.6e}"));
    for (k, &(a, b)) in contact.iter().enumerate() {
        text(&mut s, MARGIN + bar_h + 30.0 + 16.0 * k as f64, format!("contact [{a:.4}, {b:.4}]"));
    }
    let _ = writeln!(s, "</svg>");
    s
}

pub fn render_heatmap(field: &Field, contact: &[(f64, f64)], path: &Path) -> std::io::Result<()> {
    if field.values().iter().any(|v| !v.is_finite()) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "field has non-finite values"));
    }
    std::fs::write(path, heatmap_svg(field, contact))
}
