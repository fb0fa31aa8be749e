//! Minimal SVG writer for the report command: grouped bar charts and
//! loss-curve polylines, no external dependencies.

use std::fmt::Write as _;

const PALETTE: [&str; 6] = [
    "#4472c4", "#ed7d31", "#70ad47", "#ffc000", "#7030a0", "#a5a5a5",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One labeled value per bar; bars share a zero baseline.
pub fn bar_chart(title: &str, bars: &[(String, f64)], unit: &str) -> String {
    let w = 640.0;
    let h = 320.0;
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let max = bars.iter().map(|(_, v)| *v).fold(0.0_f64, f64::max).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        w / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let n = bars.len().max(1);
    let slot = plot_w / n as f64;
    let bar_w = slot * 0.6;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = left + slot * i as f64 + (slot - bar_w) / 2.0;
        let bh = plot_h * (v / max).clamp(0.0, 1.0);
        let y = top + plot_h - bh;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"{color}\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}{}</text>",
            x + bar_w / 2.0,
            y - 4.0,
            v,
            esc(unit)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x + bar_w / 2.0,
            top + plot_h + 16.0,
            esc(label)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// One polyline per named series, each scaled to the shared y-range.
pub fn line_chart(title: &str, series: &[(String, Vec<f64>)], y_label: &str) -> String {
    let w = 640.0;
    let h = 320.0;
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 40.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut x_max = 1usize;
    for (_, vs) in series {
        x_max = x_max.max(vs.len().saturating_sub(1)).max(1);
        for &v in vs {
            if v.is_finite() {
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        w / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"#333\"/>",
        top + plot_h
    );
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{y_max:.3}</text>",
        left - 4.0,
        top + 10.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{y_min:.3}</text>",
        left - 4.0,
        top + plot_h
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
        left,
        h - 8.0,
        esc(y_label)
    );
    for (si, (name, vs)) in series.iter().enumerate() {
        if vs.is_empty() {
            continue;
        }
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = vs
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = left + plot_w * i as f64 / x_max as f64;
                let y = top + plot_h * (1.0 - (v - y_min) / (y_max - y_min));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            left + plot_w - 120.0,
            top + 14.0 * (si as f64 + 1.0),
            esc(name)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}
