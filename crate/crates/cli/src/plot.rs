//! Line charts of run CSVs (quality curves, load sweeps) as SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Columns to plot when none are given: quality curves, then sweeps.
pub fn default_columns(headers: &[String]) -> Option<(&'static str, &'static str)> {
    let has = |c: &str| headers.iter().any(|h| h == c);
    if has("labels_used") && has("auc") && has("train_count") {
        Some(("labels_used", "auc"))
    } else if has("input_rate") && has("throughput") {
        Some(("input_rate", "throughput"))
    } else {
        None
    }
}

/// Reads `x` and `y` from a CSV file. Rows with an empty or non-numeric
/// cell are skipped. Quality curves are split per (mode, dedup).
pub fn read_series(path: &Path, x: Option<&str>, y: Option<&str>) -> Result<(String, String, Vec<Series>)> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    let (dx, dy) = default_columns(&headers).unwrap_or(("", ""));
    let x = x.unwrap_or(dx);
    let y = y.unwrap_or(dy);
    if x.is_empty() || y.is_empty() {
        bail!("{}: pass --x and --y; columns are {}", path.display(), headers.join(", "));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: no column `{name}`", path.display()))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let split: Vec<usize> = ["mode", "dedup"].iter().filter_map(|c| headers.iter().position(|h| h == c)).collect();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_owned();
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rd.records() {
        let row = row?;
        let (Some(xv), Some(yv)) = (
            row.get(xi).and_then(|v| v.parse::<f64>().ok()),
            row.get(yi).and_then(|v| v.parse::<f64>().ok()),
        ) else {
            continue;
        };
        let mut name = stem.clone();
        for &i in &split {
            match (headers[i].as_str(), row.get(i).unwrap_or("")) {
                ("dedup", "true") => name.push_str(" dedup"),
                ("dedup", _) => {}
                (_, v) => {
                    name.push(' ');
                    name.push_str(v);
                }
            }
        }
        groups.entry(name).or_default().push((xv, yv));
    }
    let series = groups.into_iter().map(|(name, points)| Series { name, points }).collect();
    Ok((x.to_owned(), y.to_owned(), series))
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0.min(0.0).max(y0 - (y1 - y0) * 0.05), y1 + (y1 - y0) * 0.05)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            bottom + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            right,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Long-form `series,x,y` table of all series.
pub fn render_csv(x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", x_label, y_label])?;
    for s in series {
        for (x, y) in &s.points {
            w.write_record([s.name.clone(), x.to_string(), y.to_string()])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_csv_splits_by_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quality.csv");
        std::fs::write(
            &p,
            "labels_used,train_count,test_count,auc,mode,dedup\n62,50,12,,passive,false\n124,100,24,0.8,passive,false\n62,50,12,0.7,passive,true\n",
        )
        .unwrap();
        let (x, y, series) = read_series(&p, None, None).unwrap();
        assert_eq!((x.as_str(), y.as_str()), ("labels_used", "auc"));
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].name, "quality passive");
        assert_eq!(series[0].points, vec![(124.0, 0.8)]);
        assert_eq!(series[1].name, "quality passive dedup");
        let svg = render_svg("t", &x, &y, &series);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        let csv = render_csv(&x, &y, &series).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn unknown_columns_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_series(&p, None, None).is_err());
        assert!(read_series(&p, Some("a"), Some("c")).is_err());
        let (_, _, s) = read_series(&p, Some("a"), Some("b")).unwrap();
        assert_eq!(s[0].points, vec![(1.0, 2.0)]);
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = render_svg("empty", "x", "y", &[]);
        assert!(svg.contains("</svg>"));
        assert!(!svg.contains("NaN"));
    }
}
