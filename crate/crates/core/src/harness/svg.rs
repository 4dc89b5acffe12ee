//! Standalone scatter-plot SVGs.
//!
//! The viewBox is in data coordinates (y flipped), spanning the data
//! bounds plus a 10% margin on every side. Output depends only on the
//! inputs, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::evaldata::SampleSet;
use crate::{LabError, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn num(v: f64) -> String {
    let s = format!("{v:.5}");
    // Avoid "-0.00000".
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0.00000".to_string()
    } else {
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_scatter_svg(sets: &[(SampleSet, String)]) -> Result<String> {
    if sets.is_empty() {
        return Err(LabError::Usage("nothing to plot".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (set, _) in sets {
        for i in 0..set.len() {
            let [x, y] = set.point(i);
            if !(x.is_finite() && y.is_finite()) {
                return Err(LabError::Numeric("cannot plot non-finite points".into()));
            }
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.1 * span, span * 1.2)
    };
    let (vx, vw) = pad(x0, x1);
    let (vy, vh) = pad(-y1, -y0);
    let scale = vw.max(vh);
    let r = 0.004 * scale;
    let font = 0.03 * scale;

    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\" width=\"600\" height=\"{}\">",
        num(vx),
        num(vy),
        num(vw),
        num(vh),
        (600.0 * vh / vw).round() as i64
    );
    let mut provenance: Vec<&str> = sets.iter().map(|(s, _)| s.provenance.as_str()).collect();
    provenance.sort_unstable();
    provenance.dedup();
    let _ = writeln!(out, "<desc>config_digest={}</desc>", escape(&provenance.join(",")));
    let _ = writeln!(
        out,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
        num(vx),
        num(vy),
        num(vw),
        num(vh)
    );
    for (k, (set, label)) in sets.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(out, "<g fill=\"{color}\" fill-opacity=\"0.6\" data-label=\"{}\">", escape(label));
        for i in 0..set.len() {
            let [x, y] = set.point(i);
            let _ = writeln!(out, "<circle cx=\"{}\" cy=\"{}\" r=\"{}\"/>", num(x), num(-y), num(r));
        }
        out.push_str("</g>\n");
    }
    out.push_str("<g font-family=\"sans-serif\">\n");
    for (k, (_, label)) in sets.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let ly = vy + font * (1.5 + 1.3 * k as f64);
        let lx = vx + 0.5 * font;
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>",
            num(lx),
            num(ly - 0.8 * font),
            num(0.8 * font),
            num(0.8 * font)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\">{}</text>",
            num(lx + 1.2 * font),
            num(ly),
            num(font),
            escape(label)
        );
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// Write a scatter plot with one color per labelled set.
pub fn emit_scatter_svg(sets: &[(SampleSet, String)], path: &Path) -> Result<()> {
    let svg = render_scatter_svg(sets)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}
