use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::results::{AggregateRow, ResultsTable};
use crate::datasets::TaskKind;
use crate::error::{ensure, Error, Result};
use crate::unet::BackboneVariant;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Files written by [`render_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub charts: Vec<PathBuf>,
    pub summaries: Vec<PathBuf>,
}

fn variants_of(rows: &[&AggregateRow]) -> Vec<BackboneVariant> {
    let mut v: Vec<BackboneVariant> = rows.iter().map(|a| a.variant).collect();
    v.sort();
    v.dedup();
    v
}

fn ks_of(rows: &[&AggregateRow]) -> Vec<usize> {
    let mut k: Vec<usize> = rows.iter().map(|a| a.k).collect();
    k.sort();
    k.dedup();
    k
}

fn task_rows(table: &ResultsTable, task: TaskKind) -> Vec<&AggregateRow> {
    table.aggregates.iter().filter(|a| a.task == task).collect()
}

/// Rows are k values, columns variants; means at four decimals.
pub fn summary_csv(table: &ResultsTable, task: TaskKind) -> String {
    let rows = task_rows(table, task);
    let variants = variants_of(&rows);
    let mut out = String::from("k");
    for v in &variants {
        out.push(',');
        out.push_str(v.name());
    }
    out.push('\n');
    for k in ks_of(&rows) {
        out.push_str(&k.to_string());
        for &v in &variants {
            out.push(',');
            if let Some(a) = rows.iter().find(|a| a.variant == v && a.k == k) {
                let _ = write!(out, "{:.4}", a.mean);
            }
        }
        out.push('\n');
    }
    out
}

/// Line chart of mean balanced accuracy over k with a one-std band per
/// variant. k values are spaced evenly; zero-shot points that beat both
/// baselines carry a `***` marker.
pub fn render_svg(table: &ResultsTable, task: TaskKind) -> String {
    let rows = task_rows(table, task);
    let variants = variants_of(&rows);
    let ks = ks_of(&rows);
    let lo = rows
        .iter()
        .map(|a| a.mean - a.std)
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|a| a.mean + a.std)
        .fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if lo.is_finite() && hi.is_finite() {
        let (a, b) = ((lo * 20.0).floor() / 20.0, (hi * 20.0).ceil() / 20.0);
        if b > a {
            (a, b)
        } else {
            (a - 0.05, a + 0.05)
        }
    } else {
        (0.0, 1.0)
    };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |i: usize| {
        if ks.len() <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (ks.len() - 1) as f64
        }
    };
    let y_of = |v: f64| TOP + plot_h * (1.0 - (v - y0) / (y1 - y0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="22" font-size="14">{task}</text>"#);
    let steps = ((y1 - y0) / 0.05).round() as usize;
    for i in 0..=steps {
        let v = y0 + 0.05 * i as f64;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (i, k) in ks.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{k}</text>"#,
            x_of(i),
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">k (unlabeled target images)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">balanced accuracy</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );

    for (vi, &variant) in variants.iter().enumerate() {
        let color = PALETTE[vi % PALETTE.len()];
        let series: Vec<(f64, &AggregateRow)> = ks
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| {
                rows.iter()
                    .find(|a| a.variant == variant && a.k == k)
                    .map(|a| (x_of(i), *a))
            })
            .collect();
        let mut band: Vec<String> = series
            .iter()
            .map(|(x, a)| format!("{x:.2},{:.2}", y_of(a.mean + a.std)))
            .collect();
        band.extend(
            series
                .iter()
                .rev()
                .map(|(x, a)| format!("{x:.2},{:.2}", y_of(a.mean - a.std))),
        );
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = series
            .iter()
            .map(|(x, a)| format!("{x:.2},{:.2}", y_of(a.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for (x, a) in &series {
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                y_of(a.mean)
            );
            if a.k == 0 && a.significant_vs_both() {
                let _ = writeln!(
                    s,
                    r#"<text class="significance" x="{:.2}" y="{:.2}" fill="{color}">***</text>"#,
                    x + 5.0,
                    y_of(a.mean) - 6.0 - 11.0 * vi as f64
                );
            }
        }
        let ly = TOP + 16.0 + 18.0 * vi as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{variant}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<task>.svg` and `<task>_summary.csv` for every task in `table`.
pub fn render_report(table: &ResultsTable, out_dir: &Path) -> Result<ReportFiles> {
    ensure!(
        !table.aggregates.is_empty(),
        "render_report",
        "results table is empty"
    );
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = ReportFiles::default();
    for task in table.tasks() {
        let svg = out_dir.join(format!("{task}.svg"));
        write(&svg, &render_svg(table, task))?;
        let csv = out_dir.join(format!("{task}_summary.csv"));
        write(&csv, &summary_csv(table, task))?;
        files.charts.push(svg);
        files.summaries.push(csv);
    }
    Ok(files)
}
