//! Static SVG line charts of the per-block regularisation losses.

use std::fmt::Write;

use crate::trainer::{epoch_block_means, MetricsRow};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 150.0, 40.0, 50.0); // left, right, top, bottom
const COLOURS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Epoch-mean channel (solid) and spatial (dashed) loss of every block.
/// Returns `None` when the log has no regularisation columns.
pub fn mars_loss_svg(rows: &[MetricsRow]) -> Option<String> {
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    epochs.dedup();
    let means: Vec<(usize, Vec<(f64, f64)>)> =
        epochs.iter().filter_map(|&e| epoch_block_means(rows, e).map(|m| (e, m))).collect();
    let blocks = means.first()?.1.len();
    let ymax = means.iter().flat_map(|(_, m)| m.iter().flat_map(|&(c, s)| [c, s])).fold(0.0, f64::max).max(1e-9) * 1.05;
    let (e0, e1) = (means[0].0 as f64, means[means.len() - 1].0 as f64);
    let (l, r, t, b) = MARGIN;
    let (pw, ph) = (WIDTH - l - r, HEIGHT - t - b);
    let x = |e: f64| l + if e1 > e0 { (e - e0) / (e1 - e0) * pw } else { pw / 2.0 };
    let y = |v: f64| t + ph - v / ymax * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">MARs regularization loss per block</text>"#, l + pw / 2.0);
    let _ = writeln!(s, r#"<path d="M{l},{t} V{} H{}" fill="none" stroke="black"/>"#, t + ph, l + pw);
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, l - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{l}" y="{}" text-anchor="middle">{e0}</text>"#, t + ph + 18.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{e1}</text>"#, l + pw, t + ph + 18.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, l + pw / 2.0, HEIGHT - 10.0);
    for i in 0..blocks {
        let colour = COLOURS[i % COLOURS.len()];
        for (kind, dash) in [(0, ""), (1, r#" stroke-dasharray="6 4""#)] {
            let pts: Vec<String> = means
                .iter()
                .map(|(e, m)| {
                    let v = if kind == 0 { m[i].0 } else { m[i].1 };
                    format!("{:.1},{:.1}", x(*e as f64), y(v))
                })
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>"#, pts.join(" "));
            let ly = t + 10.0 + (2 * i + kind) as f64 * 18.0;
            let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"{dash}/>"#, l + pw + 12.0, l + pw + 36.0);
            let label = if kind == 0 { "channel" } else { "spatial" };
            let _ = writeln!(s, r#"<text x="{}" y="{}">block {} {label}</text>"#, l + pw + 42.0, ly + 4.0, i + 1);
        }
    }
    s.push_str("</svg>\n");
    Some(s)
}
