use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::aggregate::{AggregateRow, METRIC_NAMES};
use super::io::write_runs_csv;
use super::{RunRecord, SweepMode};
use crate::error::Result;
use crate::suite::Category;

#[derive(Debug, Clone, PartialEq)]
pub struct TurningPoint {
    pub mode: SweepMode,
    pub category: Category,
    /// Largest grid `x` such that every grid point up to it keeps mean ta2
    /// at or above `threshold * max`. `None` if the first point already fails.
    pub x: Option<f64>,
    pub max_ta2: f64,
}

/// Applies the threshold rule to each `(mode, category)` curve of the step
/// and block sweeps.
pub fn turning_points(aggs: &[AggregateRow], threshold: f64) -> Vec<TurningPoint> {
    let mut curves: BTreeMap<(SweepMode, Category), Vec<(f64, f64)>> = BTreeMap::new();
    for a in aggs.iter().filter(|a| a.mode != SweepMode::Qualitative) {
        let (ta2, _) = a.metric("ta2").expect("ta2 column");
        curves.entry((a.mode, a.category)).or_default().push((a.x, ta2));
    }
    curves
        .into_iter()
        .map(|((mode, category), mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let max_ta2 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let cut = threshold * max_ta2;
            let x = pts.iter().take_while(|p| p.1 >= cut).last().map(|p| p.0);
            TurningPoint {
                mode,
                category,
                x,
                max_ta2,
            }
        })
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn write_aggregates_csv(path: &Path, aggs: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["mode".to_string(), "category".into(), "x".into(), "setting".into(), "n".into()];
    for m in METRIC_NAMES {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for a in aggs {
        let mut row = vec![
            a.mode.to_string(),
            a.category.to_string(),
            a.x.to_string(),
            a.setting.to_string(),
            a.n.to_string(),
        ];
        for k in 0..METRIC_NAMES.len() {
            row.push(fmt_num(a.mean[k]));
            row.push(fmt_num(a.std[k]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// A static SVG 1.1 line chart of `metric` against `x`, one polyline per
/// `(category, setting)` series of `mode`. `None` when there is nothing to draw.
pub fn render_svg(aggs: &[AggregateRow], metric: &str, mode: SweepMode) -> Option<String> {
    let idx = METRIC_NAMES.iter().position(|m| *m == metric)?;
    let mut series: BTreeMap<(Category, u8), Vec<(f64, f64)>> = BTreeMap::new();
    for a in aggs.iter().filter(|a| a.mode == mode && !a.mean[idx].is_nan()) {
        series.entry((a.category, a.setting)).or_default().push((a.x, a.mean[idx]));
    }
    if series.is_empty() {
        return None;
    }
    let ys = series.values().flatten().map(|p| p.1);
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), y| (l.min(y), h.max(y)));
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + x * pw;
    let py = |y: f64| top + (hi - y) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{metric} vs x ({mode})</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=10 {
        let x = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{x:.1}</text>"#,
            px(x),
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    for i in 0..=4 {
        let y = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="#dddddd"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{y:.3}</text>"##,
            left,
            py(y),
            left + pw,
            left - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">fusion ratio x</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for (n, ((cat, setting), mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[n % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let label = if setting == 0 {
            cat.to_string()
        } else {
            format!("{cat} s{setting}")
        };
        let ly = top + 10.0 + 18.0 * n as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{label}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn summary(aggs: &[AggregateRow], runs: &[RunRecord], threshold: f64) -> String {
    let mut s = String::from("# Sweep summary\n\n");
    if aggs.is_empty() {
        s.push_str("no data\n");
        return s;
    }
    let failed = runs.iter().filter(|r| r.metrics.is_none()).count();
    let _ = writeln!(s, "Runs: {} ({} failed)\n", runs.len(), failed);
    let tps = turning_points(aggs, threshold);
    if !tps.is_empty() {
        let _ = writeln!(
            s,
            "## Turning points\n\nLargest x keeping mean ta2 within {:.0}% of its maximum.\n",
            threshold * 100.0
        );
        s.push_str("| mode | category | turning point | max mean ta2 |\n|---|---|---|---|\n");
        for tp in &tps {
            let x = tp.x.map(|x| format!("{x}")).unwrap_or_else(|| "none".into());
            let _ = writeln!(s, "| {} | {} | {x} | {:.4} |", tp.mode, tp.category, tp.max_ta2);
        }
        s.push('\n');
    }
    s.push_str("## Means\n\n| mode | category | x | setting | n | ta1 | ta2 | ta_mean | ic | bc |\n|---|---|---|---|---|---|---|---|---|---|\n");
    for a in aggs {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            a.mode, a.category, a.x, a.setting, a.n, a.mean[0], a.mean[1], a.mean[2], a.mean[3], a.mean[4]
        );
    }
    s
}

/// Writes `aggregates.csv`, `runs.csv`, one `{metric}_{mode}.svg` per metric
/// and mode present, and `summary.md`. Returns the paths written.
pub fn emit_report(
    aggs: &[AggregateRow],
    runs: &[RunRecord],
    out_dir: &Path,
    threshold: f64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let p = out_dir.join("aggregates.csv");
    write_aggregates_csv(&p, aggs)?;
    written.push(p);
    let p = out_dir.join("runs.csv");
    write_runs_csv(&p, runs)?;
    written.push(p);
    let mut modes: Vec<SweepMode> = aggs.iter().map(|a| a.mode).collect();
    modes.dedup();
    for mode in modes {
        for metric in METRIC_NAMES {
            if let Some(svg) = render_svg(aggs, metric, mode) {
                let p = out_dir.join(format!("{metric}_{mode}.svg"));
                fs::write(&p, svg)?;
                written.push(p);
            }
        }
    }
    let p = out_dir.join("summary.md");
    fs::write(&p, summary(aggs, runs, threshold))?;
    written.push(p);
    Ok(written)
}
