//! Static top-down trajectory plots.

use std::fmt::Write;

use magnet_core::dataset::MotionSequence;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Root paths of every present agent projected onto the floor (x right,
/// z up), with a dot at the first frame.
pub fn trajectory_svg(seq: &MotionSequence) -> String {
    let agents: Vec<usize> = seq.active_agents();
    let pts = |a: usize| (0..seq.num_frames).map(move |t| (seq.root(t, a).t[0], seq.root(t, a).t[2]));
    let (mut lo_x, mut hi_x, mut lo_z, mut hi_z) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &a in &agents {
        for (x, z) in pts(a) {
            lo_x = lo_x.min(x);
            hi_x = hi_x.max(x);
            lo_z = lo_z.min(z);
            hi_z = hi_z.max(z);
        }
    }
    let span = (hi_x - lo_x).max(hi_z - lo_z).max(1e-3);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let map = |x: f64, z: f64| (MARGIN + (x - lo_x) * scale, SIZE - MARGIN - (z - lo_z) * scale);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, &a) in agents.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts(a).map(|(x, z)| {
            let (u, v) = map(x, z);
            format!("{u:.2},{v:.2}")
        }).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        if let Some((x, z)) = pts(a).next() {
            let (u, v) = map(x, z);
            let _ = writeln!(out, r#"<circle cx="{u:.2}" cy="{v:.2}" r="4" fill="{color}"/>"#);
        }
        let _ = writeln!(out, r#"<text x="{MARGIN}" y="{}" font-size="12" fill="{color}">agent {a}</text>"#, 14 + 14 * k);
    }
    out.push_str("</svg>\n");
    out
}
