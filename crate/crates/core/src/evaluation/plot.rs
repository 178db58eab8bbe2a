use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{CellStatus, ComparisonReport, Phase};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub backbone: String,
    pub phase: Phase,
    pub mae: f64,
}

/// MAE of every complete cell, in report order.
pub fn plot_rows(report: &ComparisonReport) -> Result<Vec<PlotRow>> {
    let rows: Vec<PlotRow> = report
        .cells
        .iter()
        .filter(|c| c.status == CellStatus::Complete)
        .filter_map(|c| {
            c.mean.map(|m| PlotRow {
                backbone: c.backbone.clone(),
                phase: c.phase,
                mae: m.mae,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Report("no complete cells to plot".into()));
    }
    Ok(rows)
}

pub fn plot_csv(rows: &[PlotRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["backbone", "phase", "mae"])?;
    for r in rows {
        w.write_record([r.backbone.clone(), r.phase.to_string(), r.mae.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

const BAR: f64 = 28.0;
const BAR_GAP: f64 = 6.0;
const GROUP_GAP: f64 = 36.0;
const LEFT: f64 = 72.0;
const TOP: f64 = 48.0;
const PLOT_H: f64 = 300.0;
const BOTTOM: f64 = 64.0;
const RIGHT: f64 = 150.0;

fn colour(phase: Phase) -> &'static str {
    match phase {
        Phase::BeforeFiltering => "#4c72b0",
        Phase::AfterFiltering => "#dd8452",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn decade_label(e: i32) -> String {
    if e >= 0 {
        format!("{}", 10f64.powi(e))
    } else {
        format!("{:.*}", (-e) as usize, 10f64.powi(e))
    }
}

/// Grouped bar chart (one group per backbone, one bar per phase) on a
/// base-10 log MAE axis spanning whole decades.
pub fn render_svg(rows: &[PlotRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Report("no rows to plot".into()));
    }
    if let Some(r) = rows.iter().find(|r| !(r.mae > 0.0 && r.mae.is_finite())) {
        return Err(Error::Report(format!(
            "MAE {} of {} {} cannot be drawn on a log axis",
            r.mae, r.backbone, r.phase
        )));
    }
    let mut groups: Vec<(&str, Vec<&PlotRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(b, _)| *b == r.backbone) {
            Some((_, v)) => v.push(r),
            None => groups.push((&r.backbone, vec![r])),
        }
    }
    for (_, v) in &mut groups {
        v.sort_by_key(|r| r.phase);
    }

    let min = rows.iter().map(|r| r.mae).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.mae).fold(0.0, f64::max);
    let lo = min.log10().floor() as i32;
    let mut hi = max.log10().ceil() as i32;
    if hi <= lo {
        hi = lo + 1;
    }
    let y = |v: f64| TOP + PLOT_H * (hi as f64 - v.log10()) / (hi - lo) as f64;
    let base = TOP + PLOT_H;

    let plot_w: f64 = groups
        .iter()
        .map(|(_, v)| v.len() as f64 * BAR + (v.len() - 1) as f64 * BAR_GAP + GROUP_GAP)
        .sum::<f64>()
        + GROUP_GAP;
    let width = LEFT + plot_w + RIGHT;
    let height = TOP + PLOT_H + BOTTOM;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">MAE by backbone (log scale)</text>"#,
        LEFT + plot_w / 2.0
    );
    for e in lo..=hi {
        let ty = y(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#dddddd"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            ty + 4.0,
            decade_label(e)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">MAE (years)</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );

    let mut x = LEFT + GROUP_GAP;
    for (backbone, bars) in &groups {
        let start = x;
        for r in bars {
            let top = y(r.mae);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{top:.2}" width="{BAR:.2}" height="{:.2}" fill="{}"><title>{} {} MAE {:.4}</title></rect>"#,
                base - top,
                colour(r.phase),
                escape(backbone),
                r.phase,
                r.mae
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{:.4}</text>"#,
                x + BAR / 2.0,
                top - 4.0,
                r.mae
            );
            x += BAR + BAR_GAP;
        }
        x -= BAR_GAP;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (start + x) / 2.0,
            base + 18.0,
            escape(backbone)
        );
        x += GROUP_GAP;
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{base:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.2}" y1="{base:.2}" x2="{:.2}" y2="{base:.2}" stroke="black"/>"#,
        LEFT + plot_w
    );

    let lx = LEFT + plot_w + 16.0;
    for (i, phase) in Phase::ALL.iter().enumerate() {
        let ly = TOP + 8.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{ly:.2}" width="12" height="12" fill="{}"/>"#,
            colour(*phase)
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{phase}</text>"#, lx + 18.0, ly + 10.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `plot.csv` and `plot.svg` into `dir` and returns their paths.
pub fn emit_plot_data(report: &ComparisonReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let rows = plot_rows(report)?;
    fs::create_dir_all(dir).at(dir)?;
    let csv = dir.join("plot.csv");
    fs::write(&csv, plot_csv(&rows)?).at(&csv)?;
    let svg = dir.join("plot.svg");
    fs::write(&svg, render_svg(&rows)?).at(&svg)?;
    Ok((csv, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(b: &str, phase: Phase, mae: f64) -> PlotRow {
        PlotRow {
            backbone: b.into(),
            phase,
            mae,
        }
    }

    fn bars(svg: &str) -> usize {
        svg.matches("<title>").count()
    }

    #[test]
    fn single_bar() {
        let svg = render_svg(&[row("stub", Phase::BeforeFiltering, 2.0)]).unwrap();
        assert_eq!(bars(&svg), 1);
        // one decade: 1 and 10
        assert!(svg.contains(">1</text>") && svg.contains(">10</text>"));
    }

    #[test]
    fn wide_range_spans_decades() {
        let svg = render_svg(&[
            row("a", Phase::BeforeFiltering, 0.82),
            row("b", Phase::AfterFiltering, 87.59),
        ])
        .unwrap();
        assert_eq!(bars(&svg), 2);
        for label in [">0.1<", ">1<", ">10<", ">100<"] {
            assert!(svg.contains(label), "{label}");
        }
    }

    #[test]
    fn lower_mae_is_shorter_bar() {
        let svg = render_svg(&[
            row("r", Phase::BeforeFiltering, 0.9136),
            row("r", Phase::AfterFiltering, 0.8242),
        ])
        .unwrap();
        let heights: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("<title>"))
            .map(|l| {
                let h = l.split("height=\"").nth(1).unwrap();
                h[..h.find('"').unwrap()].parse().unwrap()
            })
            .collect();
        assert!(heights[1] < heights[0]);
    }

    #[test]
    fn rejects_non_positive() {
        assert!(render_svg(&[row("a", Phase::BeforeFiltering, 0.0)]).is_err());
        assert!(render_svg(&[]).is_err());
    }

    #[test]
    fn escapes_names() {
        let svg = render_svg(&[row("a<b", Phase::BeforeFiltering, 1.5)]).unwrap();
        assert!(svg.contains("a&lt;b") && !svg.contains("a<b"));
    }
}
