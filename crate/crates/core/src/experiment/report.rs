//! Metrics CSV and learning-curve SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::{MetricRow, EVAL_ATTACK_KEYS};

pub const METRICS_HEADER: [&str; 9] = [
    "round",
    "variant",
    "clean_acc",
    "fgsm",
    "bim",
    "pgd40",
    "pgd100",
    "mean_loss",
    "seconds",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("{other:?}"),
        },
    }
}

/// One line per evaluated round; attacks that were not evaluated are left
/// empty. Numbers carry six decimals.
pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![r.round.to_string(), r.variant.clone(), format!("{:.6}", r.clean_acc)];
        for key in EVAL_ATTACK_KEYS {
            rec.push(r.robust.get(key).map_or_else(String::new, |v| format!("{v:.6}")));
        }
        rec.push(format!("{:.6}", r.mean_loss));
        rec.push(format!("{:.6}", r.seconds));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "unexpected metrics header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |col: &str| Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("bad `{col}` value"),
        };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
        let mut robust = BTreeMap::new();
        for (k, key) in EVAL_ATTACK_KEYS.iter().enumerate() {
            if !rec[3 + k].is_empty() {
                robust.insert(key.to_string(), num(3 + k)?);
            }
        }
        rows.push(MetricRow {
            round: rec[0].parse().map_err(|_| bad("round"))?,
            variant: rec[1].to_string(),
            clean_acc: num(2)?,
            robust,
            mean_loss: num(7)?,
            seconds: num(8)?,
        });
    }
    Ok(rows)
}

const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy vs round: one polyline for clean accuracy and one per
/// evaluated attack, with axes and a legend.
pub fn learning_curve_svg(rows: &[MetricRow], attacks: &[String], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Metric("learning curve needs at least one evaluated round".into()));
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_round = rows.iter().map(|r| r.round).max().unwrap_or(0).max(1) as f64;
    let x = |round: usize| left + pw * round as f64 / max_round;
    let y = |acc: f64| top + ph * (1.0 - acc.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    // axes and ticks
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y(v) + 4.0);
        let r = (max_round * v).round() as usize;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{r}</text>"#, x(r), top + ph + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    let mut series: Vec<(String, Vec<(usize, f64)>)> =
        vec![("clean".into(), rows.iter().map(|r| (r.round, r.clean_acc)).collect())];
    for a in attacks {
        series.push((a.clone(), rows.iter().filter_map(|r| r.robust.get(a).map(|&v| (r.round, v))).collect()));
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(r, v)| format!("{:.2},{:.2}", x(r), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            escape(name)
        );
        for &(r, v) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, x(r), y(v));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_learning_curve_svg(rows: &[MetricRow], attacks: &[String], title: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, learning_curve_svg(rows, attacks, title)?).map_err(|e| Error::io(path, e))
}
