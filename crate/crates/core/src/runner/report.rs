//! Result files: `results.json`, per-series CSV and self-contained SVG plots.
//!
//! Layout under the output directory:
//!
//! ```text
//! results.json
//! <label>/lambda_max.csv  (+ .svg)   epoch,value
//! hamming.csv             (+ .svg)   epoch,h_orig,h_s2ap,diff
//! sharpness.csv           (+ .svg)   rho,orig,s2ap
//! ```
//!
//! The paired files need both a `baseline` and an `s2ap` result; otherwise
//! they hold only their header and no plot is drawn.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::pipeline::{ExperimentResult, GammaSweep, PairedDiff};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<ExperimentResult>,
    pub paired: Option<PairedDiff>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn report_json(report: &Report) -> String {
    serde_json::to_string_pretty(report).expect("report serialises")
}

fn find<'a>(results: &'a [ExperimentResult], label: &str) -> Option<&'a ExperimentResult> {
    results.iter().find(|r| r.label == label)
}

/// Writes every artifact for `results` under `dir`.
pub fn emit_report(results: &[ExperimentResult], paired: Option<&PairedDiff>, dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Config("emit_report needs at least one result".into()));
    }
    let report = Report {
        results: results.to_vec(),
        paired: paired.cloned(),
    };
    write(&dir.join("results.json"), &report_json(&report))?;

    for r in results {
        let rows: Vec<Vec<f64>> = r
            .sharpness
            .lambda_max
            .iter()
            .enumerate()
            .map(|(e, v)| vec![(e + 1) as f64, *v])
            .collect();
        emit_series(
            &dir.join(&r.label).join("lambda_max"),
            &["epoch", "value"],
            &rows,
            &format!("lambda_max ({})", r.label),
        )?;
    }

    let pair = find(results, "baseline").zip(find(results, "s2ap"));
    let hamming: Vec<Vec<f64>> = match pair {
        Some((b, s)) => b
            .hamming
            .iter()
            .zip(&s.hamming)
            .enumerate()
            .map(|(e, (hb, hs))| vec![(e + 1) as f64, *hb, *hs, hb - hs])
            .collect(),
        None => Vec::new(),
    };
    emit_series(
        &dir.join("hamming"),
        &["epoch", "h_orig", "h_s2ap", "diff"],
        &hamming,
        "hamming distance to initial mask",
    )?;

    let sharp: Vec<Vec<f64>> = match pair {
        Some((b, s)) => b
            .sharpness
            .loss_diff
            .iter()
            .zip(&s.sharpness.loss_diff)
            .map(|((rho, lb), (_, ls))| vec![*rho, *lb, *ls])
            .collect(),
        None => Vec::new(),
    };
    emit_series(&dir.join("sharpness"), &["rho", "orig", "s2ap"], &sharp, "loss-difference sharpness")
}

pub fn emit_gamma_sweep(sweep: &GammaSweep, dir: &Path) -> Result<()> {
    let mut csv = String::from("gamma,mask_robust_acc_mean,mask_robust_acc_std\n");
    for r in &sweep.rows {
        let _ = writeln!(csv, "{:?},{:?},{:?}", r.gamma, r.mask_robust_acc.mean, r.mask_robust_acc.std);
    }
    write(&dir.join("gamma_sweep.csv"), &csv)?;
    write(
        &dir.join("gamma_sweep.json"),
        &serde_json::to_string_pretty(sweep).expect("sweep serialises"),
    )
}

/// `<stem>.csv`, plus `<stem>.svg` when there is at least one row.
fn emit_series(stem: &Path, header: &[&str], rows: &[Vec<f64>], title: &str) -> Result<()> {
    write(&stem.with_extension("csv"), &csv_text(header, rows))?;
    let svg_path = stem.with_extension("svg");
    if rows.is_empty() {
        if svg_path.exists() {
            std::fs::remove_file(&svg_path).map_err(|e| Error::io(&svg_path, e))?;
        }
        return Ok(());
    }
    let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let series: Vec<(&str, Vec<f64>)> = header[1..]
        .iter()
        .enumerate()
        .map(|(j, name)| (*name, rows.iter().map(|r| r[j + 1]).collect()))
        .collect();
    write(&svg_path, &svg_plot(title, header[0], &x, &series))
}

pub fn csv_text(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with one polyline per series; a single point is drawn as a
/// marker only.
pub fn svg_plot(title: &str, x_label: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let finite = |v: &&f64| v.is_finite();
    let (x_lo, x_hi) = bounds(x.iter().filter(finite).copied());
    let (y_lo, y_hi) = bounds(series.iter().flat_map(|(_, ys)| ys.iter().filter(finite).copied()));
    let sx = |v: f64| m + (v - x_lo) / (x_hi - x_lo) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y_lo) / (y_hi - y_lo) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, w / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="5" y="{}" font-size="10">{y_lo:.4}</text>"#, h - m);
    let _ = writeln!(s, r#"<text x="5" y="{m}" font-size="10">{y_hi:.4}</text>"#);
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = x
            .iter()
            .zip(ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(&a, &b)| (sx(a), sy(b)))
            .collect();
        if pts.len() == 1 {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, pts[0].0, pts[0].1);
        } else if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - m - 100.0,
            m + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
