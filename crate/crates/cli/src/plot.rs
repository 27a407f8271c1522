//! Hand-emitted SVG views of stored runs: per-episode heat strips of the
//! controlled state against its target, and the J distribution per method.
//!
//! No plotting dependency; the files are plain shapes and text. Strip cells
//! are colored on a diverging scale whose amplitude is shared by the state
//! and target strips so the two panels are comparable by eye. The error
//! strip has its own scale and collapses to blank when the run is exact.

use crate::results::{StoredResult, METRICS_COLUMNS};
use cldpc_core::{Error, Result};

const CELL_W: f64 = 8.0;
const CELL_H: f64 = 3.0;
const MARGIN: f64 = 44.0;
const GAP: f64 = 26.0;

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t.clamp(0.0, 1.0)).round() as u8
}

fn hex(r: u8, g: u8, b: u8) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Blue through white to red over [-amp, amp].
fn diverging(v: f64, amp: f64) -> String {
    if amp <= 0.0 {
        return "#ffffff".into();
    }
    let t = (v / amp).clamp(-1.0, 1.0);
    if t < 0.0 {
        let s = -t;
        hex(lerp(0xff, 0x21, s), lerp(0xff, 0x66, s), lerp(0xff, 0xac, s))
    } else {
        hex(lerp(0xff, 0xb2, t), lerp(0xff, 0x18, t), lerp(0xff, 0x2b, t))
    }
}

/// White to red over [0, max]; exactly white at zero.
fn sequential(v: f64, max: f64) -> String {
    if max <= 0.0 {
        return "#ffffff".into();
    }
    let t = (v / max).clamp(0.0, 1.0);
    hex(lerp(0xff, 0xb2, t), lerp(0xff, 0x18, t), lerp(0xff, 0x2b, t))
}

fn strip(out: &mut String, x0: f64, y0: f64, label: &str, rows: &[Vec<String>]) {
    out.push_str(&format!(
        "<text x=\"{x0}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">{label}</text>\n",
        y0 - 6.0
    ));
    for (c, col) in rows.iter().enumerate() {
        for (r, fill) in col.iter().enumerate() {
            let x = x0 + c as f64 * CELL_W;
            let y = y0 + r as f64 * CELL_H;
            out.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL_W}\" height=\"{CELL_H}\" fill=\"{fill}\"/>\n"
            ));
        }
    }
}

fn colorize(frames: &[Vec<f64>], color: impl Fn(f64) -> String) -> Vec<Vec<String>> {
    frames
        .iter()
        .map(|f| f.iter().map(|&v| color(v)).collect())
        .collect()
}

/// One episode as three stacked space-time panels: state, target, |error|.
/// Columns are control steps, rows are grid cells.
pub fn heat_strip_svg(r: &StoredResult) -> String {
    let steps = r.env_states.len().saturating_sub(1).min(r.u_d.len());
    let d_x = r.header.d_x;
    let u: Vec<Vec<f64>> = r.env_states.iter().skip(1).take(steps).cloned().collect();
    let ud: Vec<Vec<f64>> = r.u_d.iter().take(steps).cloned().collect();
    let diff: Vec<Vec<f64>> = u
        .iter()
        .zip(&ud)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
        .collect();

    let amp = u
        .iter()
        .chain(&ud)
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let dmax = diff.iter().flatten().fold(0.0f64, |m, &v| m.max(v));

    let strip_h = d_x as f64 * CELL_H;
    let strip_w = steps.max(1) as f64 * CELL_W;
    let width = MARGIN * 2.0 + strip_w;
    let height = MARGIN * 2.0 + 3.0 * strip_h + 2.0 * GAP;

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
    );
    let title = format!(
        "{} seed {} J={:.4e} nfe={}{}",
        r.header.method,
        r.header.seed,
        r.header.j,
        r.header.nfe,
        if r.header.failed { " (failed)" } else { "" }
    );
    out.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"16\" font-family=\"monospace\" font-size=\"12\">{title}</text>\n"
    ));

    let y_state = MARGIN;
    let y_target = MARGIN + strip_h + GAP;
    let y_diff = MARGIN + 2.0 * (strip_h + GAP);
    strip(&mut out, MARGIN, y_state, "state u", &colorize(&u, |v| diverging(v, amp)));
    strip(&mut out, MARGIN, y_target, "target", &colorize(&ud, |v| diverging(v, amp)));
    out.push_str("<g id=\"diff\">\n");
    strip(&mut out, MARGIN, y_diff, "abs error", &colorize(&diff, |v| sequential(v, dmax)));
    out.push_str("</g>\n");
    out.push_str("</svg>\n");
    out
}

/// Parse a metrics CSV emitted by this tool back into (method, J) points.
pub fn parse_metrics(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != METRICS_COLUMNS {
        return Err(Error::config(format!("unrecognized metrics header: {header}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != METRICS_COLUMNS.split(',').count() {
            return Err(Error::config(format!("metrics line {}: wrong column count", i + 2)));
        }
        let j: f64 = cols[3]
            .parse()
            .map_err(|_| Error::config(format!("metrics line {}: bad J value", i + 2)))?;
        rows.push((cols[0].to_string(), j));
    }
    Ok(rows)
}

/// Scatter of per-episode J values, one column per method, with a mean tick.
pub fn j_distribution_svg(points: &[(String, f64)]) -> String {
    let mut methods: Vec<String> = Vec::new();
    for (m, _) in points {
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let jmax = points.iter().fold(0.0f64, |m, p| m.max(p.1)).max(1e-12);
    let col_w = 90.0;
    let plot_h = 220.0;
    let width = MARGIN * 2.0 + methods.len().max(1) as f64 * col_w;
    let height = MARGIN * 2.0 + plot_h;
    let y_of = |j: f64| MARGIN + (1.0 - (j / jmax).clamp(0.0, 1.0)) * plot_h;

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
    );
    out.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"16\" font-family=\"monospace\" font-size=\"12\">episode objective by method \
         (top = {jmax:.3e})</text>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#888888\"/>\n",
        MARGIN + plot_h,
        width - MARGIN,
        MARGIN + plot_h
    ));
    for (mi, m) in methods.iter().enumerate() {
        let cx = MARGIN + (mi as f64 + 0.5) * col_w;
        let js: Vec<f64> = points.iter().filter(|p| &p.0 == m).map(|p| p.1).collect();
        for (i, &j) in js.iter().enumerate() {
            let dx = ((i % 7) as f64 - 3.0) * 5.0;
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#2166ac\" fill-opacity=\"0.6\"/>\n",
                cx + dx,
                y_of(j)
            ));
        }
        let mean = js.iter().sum::<f64>() / js.len().max(1) as f64;
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#b2182b\" stroke-width=\"2\"/>\n",
            cx - 22.0,
            y_of(mean),
            cx + 22.0,
            y_of(mean)
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{m}</text>\n",
            cx,
            MARGIN + plot_h + 16.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::ResultHeader;
    use cldpc_core::burgers::Setting;

    fn toy_result(exact: bool) -> StoredResult {
        let d_x = 6;
        let n = 4;
        let u_d: Vec<Vec<f64>> = (0..n)
            .map(|t| (0..d_x).map(|i| ((i + t) as f64).sin() * 0.3).collect())
            .collect();
        let env_states: Vec<Vec<f64>> = std::iter::once(vec![0.0; d_x])
            .chain(u_d.iter().map(|f| {
                f.iter()
                    .map(|&v| if exact { v } else { v + 0.05 })
                    .collect()
            }))
            .collect();
        StoredResult {
            header: ResultHeader {
                method: "cl".into(),
                setting: Setting::FO,
                seed: 0,
                j: 0.0,
                nfe: 10,
                wall_clock_s: 0.1,
                failed: false,
                k: 8,
                horizon: 2,
                n,
                d_x,
                h: None,
                ddim_steps: None,
                lambda: 0.0,
                n_states: n + 1,
                n_controls: n,
            },
            u_d,
            env_states,
            executed_w: vec![vec![0.0; d_x]; n],
        }
    }

    #[test]
    fn exact_run_renders_blank_error_strip() {
        let svg = heat_strip_svg(&toy_result(true));
        let start = svg.find("<g id=\"diff\">").unwrap();
        let end = svg[start..].find("</g>").unwrap() + start;
        let seg = &svg[start..end];
        let mut fills = 0;
        for (pos, _) in seg.match_indices("fill=\"#") {
            assert_eq!(&seg[pos + 7..pos + 13], "ffffff");
            fills += 1;
        }
        assert_eq!(fills, 6 * 4);
    }

    #[test]
    fn inexact_run_colors_the_error_strip() {
        let svg = heat_strip_svg(&toy_result(false));
        let start = svg.find("<g id=\"diff\">").unwrap();
        let seg = &svg[start..];
        assert!(seg.match_indices("fill=\"#").any(|(p, _)| &seg[p + 7..p + 13] != "ffffff"));
    }

    #[test]
    fn diverging_scale_endpoints() {
        assert_eq!(diverging(0.0, 1.0), "#ffffff");
        assert_eq!(diverging(1.0, 1.0), "#b2182b");
        assert_eq!(diverging(-1.0, 1.0), "#2166ac");
        assert_eq!(sequential(0.0, 2.0), "#ffffff");
        assert_eq!(sequential(2.0, 2.0), "#b2182b");
    }

    #[test]
    fn metrics_parse_and_scatter() {
        let text = format!(
            "{METRICS_COLUMNS}\ncl,full,0,0.5,2350,1.0,800,16,32,,,0.1\nrandom,full,0,2.0,0,0.1,800,16,32,,,0\n"
        );
        let rows = parse_metrics(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], ("cl".to_string(), 0.5));
        let svg = j_distribution_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(">cl<") && svg.contains(">random<"));
        assert!(parse_metrics("bogus\n").is_err());
    }
}
