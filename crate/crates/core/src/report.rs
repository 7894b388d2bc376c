//! Standalone SVG plots of sweep results.
//!
//! One row of two panels (AUROC, FPR95) per swept parameter; one line per
//! score kind. Parameter values are placed at evenly spaced ticks in
//! ascending order, since sweeps use a handful of hand-picked values.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sweep::SweepRow;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Series<'a> {
    score: &'a str,
    points: Vec<(f64, f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Renders the rows as an SVG document.
pub fn render_svg(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Empty("sweep rows"));
    }
    if let Some(r) = rows.iter().find(|r| !(r.value.is_finite() && r.auroc.is_finite() && r.fpr95.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "non-finite entry for {}={}",
            r.param, r.value
        )));
    }
    let mut params: Vec<&str> = Vec::new();
    for r in rows {
        if !params.contains(&r.param.as_str()) {
            params.push(&r.param);
        }
    }

    let width = 2.0 * PANEL_W;
    let height = PANEL_H * params.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (row_idx, param) in params.iter().enumerate() {
        let subset: Vec<&SweepRow> = rows.iter().filter(|r| r.param == *param).collect();
        let mut xs: Vec<f64> = subset.iter().map(|r| r.value).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mut series: Vec<Series> = Vec::new();
        for r in &subset {
            let x = xs.iter().position(|&v| v == r.value).expect("value present") as f64;
            match series.iter_mut().find(|s| s.score == r.score) {
                Some(s) => s.points.push((x, r.auroc, r.fpr95)),
                None => series.push(Series {
                    score: &r.score,
                    points: vec![(x, r.auroc, r.fpr95)],
                }),
            }
        }
        for s in &mut series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let y0 = row_idx as f64 * PANEL_H;
        panel(&mut svg, 0.0, y0, param, "AUROC", &xs, &series, |p| p.1);
        panel(&mut svg, PANEL_W, y0, param, "FPR95", &xs, &series, |p| p.2);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[allow(clippy::too_many_arguments)]
fn panel(
    svg: &mut String,
    x0: f64,
    y0: f64,
    param: &str,
    metric: &str,
    xs: &[f64],
    series: &[Series],
    pick: fn(&(f64, f64, f64)) -> f64,
) {
    let (left, top) = (x0 + MARGIN_L, y0 + MARGIN_T);
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);

    let values: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(pick)).collect();
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.005);
    lo = (lo - pad).max(0.0);
    hi = (hi + pad).min(1.0);
    if hi <= lo {
        hi = lo + 0.01;
    }

    let px = |i: f64| {
        if xs.len() > 1 {
            left + w * i / (xs.len() - 1) as f64
        } else {
            left + w / 2.0
        }
    };
    let py = |v: f64| top + h * (1.0 - (v - lo) / (hi - lo));

    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{} vs {}</text>"#,
        left + w / 2.0,
        y0 + 20.0,
        metric,
        esc(param)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left + w,
            left - 4.0,
            y + 4.0
        );
    }
    for (i, v) in xs.iter().enumerate() {
        let x = px(i as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top + h,
            top + h + 4.0,
            top + h + 16.0,
            fmt_value(*v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + w / 2.0,
        top + h + 34.0,
        esc(param)
    );

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, p)| {
                format!("{}{:.1},{:.1}", if j == 0 { "M" } else { "L" }, px(p.0), py(pick(p)))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            d.join(" ")
        );
        for p in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(p.0),
                py(pick(p))
            );
        }
        let ly = top + 12.0 + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" fill="{color}">{}</text>"#,
            left + w - 6.0,
            esc(s.score)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(param: &str, value: f64, score: &str, auroc: f64) -> SweepRow {
        SweepRow {
            param: param.into(),
            value,
            score: score.into(),
            auroc,
            fpr95: 1.0 - auroc,
            seeds: "0".into(),
        }
    }

    #[test]
    fn renders_one_path_per_series_and_panel() {
        let rows = vec![
            row("k", 4.0, "glmcm", 0.95),
            row("k", 0.0, "glmcm", 0.93),
            row("k", 20.0, "glmcm", 0.9),
            row("lambda", 0.0, "mcm", 0.9),
            row("lambda", 0.25, "mcm", 0.94),
        ];
        let svg = render_svg(&rows).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 4);
        assert_eq!(svg.matches("<circle").count(), 10);
        assert!(svg.contains("AUROC vs lambda"));
        assert!(svg.contains("FPR95 vs k"));
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(render_svg(&[]).is_err());
        assert!(render_svg(&[row("k", 1.0, "mcm", f64::NAN)]).is_err());
    }

    #[test]
    fn escapes_labels() {
        let svg = render_svg(&[row("a<b", 1.0, "x&y", 0.5)]).unwrap();
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("x&amp;y"));
    }
}
