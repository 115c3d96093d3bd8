//! CSV tables and dependency-free SVG charts for evaluation output.

use std::fmt::Write as _;

use crate::eval::EvalReport;
use crate::sweep::{ArmResult, DepthComparison};
use crate::SvlaError;

fn to_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String, SvlaError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| SvlaError::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| SvlaError::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per family plus an `all` row.
pub fn eval_csv(reports: &[EvalReport]) -> Result<String, SvlaError> {
    let mut rows = Vec::new();
    for r in reports {
        for f in &r.families {
            let reasons: Vec<String> = f.reasons.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            rows.push(vec![
                r.label.clone(),
                f.family.name().to_string(),
                f.trials.to_string(),
                f.successes.to_string(),
                format!("{:.4}", f.rate),
                reasons.join(" "),
            ]);
        }
        rows.push(vec![r.label.clone(), "all".into(), r.trials.to_string(), r.successes.to_string(), format!("{:.4}", r.rate), String::new()]);
    }
    to_csv(&["label", "family", "trials", "successes", "rate", "failures"], &rows)
}

/// Arms ranked by success rate, ties kept in input order. Includes the
/// visual token count each fusion layout feeds the backbone.
pub fn ablation_csv(results: &[ArmResult]) -> Result<String, SvlaError> {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[b].report.rate.total_cmp(&results[a].report.rate));
    let rows: Vec<Vec<String>> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let r = &results[i];
            vec![
                (rank + 1).to_string(),
                r.arm.name.clone(),
                r.arm.ablation.geo_feature.name().to_string(),
                if r.arm.ablation.semantics { "on" } else { "off" }.to_string(),
                r.arm.ablation.fusion.name().to_string(),
                r.arm.depth_mode.name().to_string(),
                r.arm.ablation.single_view.to_string(),
                r.visual_tokens.to_string(),
                r.parameters.to_string(),
                format!("{:.5}", r.final_loss),
                r.report.trials.to_string(),
                r.report.successes.to_string(),
                format!("{:.4}", r.report.rate),
            ]
        })
        .collect();
    to_csv(
        &[
            "rank", "arm", "geo_feature", "semantics", "fusion", "depth_mode", "single_view", "visual_tokens", "parameters", "final_loss",
            "trials", "successes", "rate",
        ],
        &rows,
    )
}

pub fn depth_csv(c: &DepthComparison) -> Result<String, SvlaError> {
    let rows = vec![
        vec!["stereo".to_string(), format!("{:.6}", c.stereo_absrel), c.train_frames.to_string(), c.test_frames.to_string()],
        vec!["mono".to_string(), format!("{:.6}", c.mono_absrel), c.train_frames.to_string(), c.test_frames.to_string()],
    ];
    to_csv(&["head", "absrel", "train_frames", "test_frames"], &rows)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#3366cc", "#dc3912", "#ff9900", "#109618", "#990099", "#0099c6"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n{body}</svg>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD / 2.0,
        H - PAD,
        H - PAD
    )
}

fn y_ticks(out: &mut String, lo: f64, hi: f64) {
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * k as f64 / 4.0;
        let _ = writeln!(out, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", PAD - 4.0, y + 4.0, fmt_tick(v));
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Vertical bars on a `[0, max(values, 1e-9)]` axis.
pub fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9);
    let mut body = String::new();
    y_ticks(&mut body, 0.0, hi);
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (H - 2.0 * PAD) * v.max(0.0) / hi;
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
            H - PAD - h,
            slot * 0.7,
            COLORS[i % COLORS.len()],
            x + slot * 0.35,
            H - PAD + 14.0,
            escape(label),
            x + slot * 0.35,
            H - PAD - h - 4.0,
            v
        );
    }
    frame(title, &body)
}

/// Polylines sharing one pair of axes. Non-finite points are skipped.
pub fn svg_line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = || series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (W - 1.5 * PAD) * (x - x0) / (x1 - x0);
    let sy = |y: f64| H - PAD - (H - 2.0 * PAD) * (y - y0) / (y1 - y0);
    let mut body = String::new();
    y_ticks(&mut body, y0, y1);
    let _ = writeln!(body, "<text x=\"{PAD}\" y=\"{}\">{}</text>", H - PAD + 14.0, fmt_tick(x0));
    let _ = writeln!(body, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", W - PAD / 2.0, H - PAD + 14.0, fmt_tick(x1));
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> =
            s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(body, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            body,
            "<rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"3\" fill=\"{color}\"/><text x=\"{}\" y=\"{:.1}\">{}</text>",
            W - 150.0,
            ly - 4.0,
            W - 136.0,
            ly,
            escape(name)
        );
    }
    frame(title, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let bar = svg_bar_chart("a<b", &[("x".into(), 0.5), ("y".into(), 0.0)]);
        assert!(bar.starts_with("<svg") && bar.trim_end().ends_with("</svg>"));
        assert!(bar.contains("a&lt;b"));
        let line = svg_line_chart("loss", &[("s".into(), vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 0.5)])]);
        assert_eq!(line.matches("<polyline").count(), 1);
        assert!(!line.contains("NaN"));
        // Empty and constant series still yield finite coordinates.
        assert!(!svg_line_chart("e", &[]).contains("NaN"));
        assert!(!svg_line_chart("c", &[("c".into(), vec![(1.0, 2.0)])]).contains("NaN"));
    }
}
