//! Static SVG figures from the CSV exports. Output depends only on the
//! input text: series and labels are emitted in a fixed order and numbers
//! use fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use sdd_core::SddError;

use crate::PlotKind;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Panel {
    Lines {
        title: String,
        x_label: String,
        y_label: String,
        series: Vec<Series>,
    },
    Bars {
        title: String,
        x_label: String,
        /// `(lo, hi, count)` per bin.
        bins: Vec<(f64, f64, f64)>,
    },
}

fn malformed(msg: impl Into<String>) -> anyhow::Error {
    SddError::Config(msg.into()).into()
}

/// Rows of a CSV file keyed by header name.
fn read_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for r in rdr.records() {
        rows.push(r?.iter().map(str::to_string).collect::<Vec<_>>());
    }
    if rows.is_empty() {
        return Err(malformed("CSV holds no data rows"));
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| malformed(format!("CSV lacks column `{name}`")))
}

fn num(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| malformed(format!("row {line}: `{s}` is not a number")))
}

/// Builds the panels for a CSV of the given kind.
pub fn panels(kind: PlotKind, text: &str) -> Result<Vec<Panel>> {
    let (header, rows) = read_rows(text)?;
    match kind {
        PlotKind::RobustnessCurves => {
            let (k, l, g, ap) = (
                column(&header, "kind")?,
                column(&header, "level")?,
                column(&header, "generator")?,
                column(&header, "ap")?,
            );
            let mut by_kind: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
            for (i, r) in rows.iter().enumerate() {
                by_kind
                    .entry(r[k].clone())
                    .or_default()
                    .entry(r[g].clone())
                    .or_default()
                    .push((num(&r[l], i + 2)?, num(&r[ap], i + 2)? * 100.0));
            }
            Ok(by_kind
                .into_iter()
                .map(|(kind, gens)| Panel::Lines {
                    title: match kind.as_str() {
                        "blur" => "Gaussian blur".into(),
                        "jpeg" => "JPEG compression".into(),
                        other => other.to_string(),
                    },
                    x_label: if kind == "blur" { "sigma".into() } else { "quality".into() },
                    y_label: "AP (%)".into(),
                    series: gens
                        .into_iter()
                        .map(|(name, points)| Series {
                            dashed: name == "mean",
                            name,
                            points,
                        })
                        .collect(),
                })
                .collect())
        }
        PlotKind::DeltaCurve => {
            let d = column(&header, "delta")?;
            let cov = column(&header, "coverage")?;
            let ap = header.iter().position(|h| h == "ap");
            let mut fill = Vec::new();
            let mut aps = Vec::new();
            for (i, r) in rows.iter().enumerate() {
                let x = 1.0 / num(&r[d], i + 2)?;
                fill.push((x, num(&r[cov], i + 2)? * 100.0));
                if let Some(a) = ap.filter(|&a| !r[a].trim().is_empty()) {
                    aps.push((x, num(&r[a], i + 2)? * 100.0));
                }
            }
            let mut series = vec![Series {
                name: "bin fill".into(),
                points: fill,
                dashed: true,
            }];
            if !aps.is_empty() {
                series.push(Series {
                    name: "mAP".into(),
                    points: aps,
                    dashed: false,
                });
            }
            Ok(vec![Panel::Lines {
                title: "Sampling rate".into(),
                x_label: "1 / delta".into(),
                y_label: "%".into(),
                series,
            }])
        }
        PlotKind::Histogram => {
            let (lo, hi, c) = (
                column(&header, "bin_lo")?,
                column(&header, "bin_hi")?,
                column(&header, "count")?,
            );
            let bins = rows
                .iter()
                .enumerate()
                .map(|(i, r)| Ok((num(&r[lo], i + 2)?, num(&r[hi], i + 2)?, num(&r[c], i + 2)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![Panel::Bars {
                title: "Cosine similarity".into(),
                x_label: "cosine".into(),
                bins,
            }])
        }
        PlotKind::Stats => {
            let (c, d, r_m, f_m) = (
                column(&header, "category")?,
                column(&header, "dim")?,
                column(&header, "real_mean")?,
                column(&header, "fake_mean")?,
            );
            let mut by_cat: BTreeMap<String, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
            for (i, r) in rows.iter().enumerate() {
                let e = by_cat.entry(r[c].clone()).or_default();
                let x = num(&r[d], i + 2)?;
                e.0.push((x, num(&r[r_m], i + 2)?));
                e.1.push((x, num(&r[f_m], i + 2)?));
            }
            Ok(by_cat
                .into_iter()
                .map(|(cat, (real, fake))| Panel::Lines {
                    title: cat,
                    x_label: "dimension".into(),
                    y_label: "mean value".into(),
                    series: vec![
                        Series {
                            name: "real".into(),
                            points: real,
                            dashed: false,
                        },
                        Series {
                            name: "fake".into(),
                            points: fake,
                            dashed: true,
                        },
                    ],
                })
                .collect())
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `[lo, hi]` padded so flat data still spans a visible range.
fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Round-number ticks (steps of 1, 2 or 5 times a power of ten) inside
/// `[lo, hi]`, with the decimals needed to print them.
fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let raw = (hi - lo) / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .min_by(|a, b| (a / raw).ln().abs().total_cmp(&(b / raw).ln().abs()))
        .unwrap();
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    let decimals = (-step.log10().floor()).clamp(0.0, 6.0) as usize;
    let vals = (first..=last).map(|k| k as f64 * step).map(|v| if v == 0.0 { 0.0 } else { v }).collect();
    (vals, decimals)
}

fn axes(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64), title: &str, xl: &str, yl: &str) {
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.1}" y="{y0:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"##,
        x0 + w / 2.0,
        y0 - 12.0,
        esc(title)
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"##,
        x0 + w / 2.0,
        y0 + h + 36.0,
        esc(xl)
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.1} {:.1})">{}</text>"##,
        x0 - 44.0,
        y0 + h / 2.0,
        x0 - 44.0,
        y0 + h / 2.0,
        esc(yl)
    );
    let (xt, xd) = ticks(xr.0, xr.1);
    for t in xt {
        let x = x0 + (t - xr.0) / (xr.1 - xr.0) * w;
        let _ = writeln!(
            out,
            r##"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{t:.xd$}</text>"##,
            y0 + h + 16.0,
        );
    }
    let (yt, yd) = ticks(yr.0, yr.1);
    for t in yt {
        let y = y0 + h - (t - yr.0) / (yr.1 - yr.0) * h;
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{t:.yd$}</text>"##,
            x0 - 6.0,
            y + 3.0,
        );
        let _ = writeln!(
            out,
            r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            x0 + w
        );
    }
}

/// Renders panels stacked vertically into one SVG document.
pub fn render_svg(panels: &[Panel]) -> String {
    let total_w = MARGIN_L + PANEL_W + MARGIN_R;
    let cell_h = MARGIN_T + PANEL_H + MARGIN_B;
    let total_h = cell_h * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}" font-family="sans-serif">"##
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, p) in panels.iter().enumerate() {
        let x0 = MARGIN_L;
        let y0 = cell_h * i as f64 + MARGIN_T;
        match p {
            Panel::Lines {
                title,
                x_label,
                y_label,
                series,
            } => {
                let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
                let yr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
                axes(&mut out, x0, y0, PANEL_W, PANEL_H, xr, yr, title, x_label, y_label);
                for (k, s) in series.iter().enumerate() {
                    let color = PALETTE[k % PALETTE.len()];
                    let pts: Vec<String> = s
                        .points
                        .iter()
                        .map(|(x, y)| {
                            format!(
                                "{:.2},{:.2}",
                                x0 + (x - xr.0) / (xr.1 - xr.0) * PANEL_W,
                                y0 + PANEL_H - (y - yr.0) / (yr.1 - yr.0) * PANEL_H
                            )
                        })
                        .collect();
                    let dash = if s.dashed { r##" stroke-dasharray="6 3""## } else { "" };
                    let _ = writeln!(
                        out,
                        r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"##,
                        pts.join(" ")
                    );
                    let ly = y0 + 12.0 + 16.0 * k as f64;
                    let lx = x0 + PANEL_W + 12.0;
                    let _ = writeln!(
                        out,
                        r##"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/>"##,
                        lx + 18.0
                    );
                    let _ = writeln!(
                        out,
                        r##"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
                        lx + 24.0,
                        ly + 4.0,
                        esc(&s.name)
                    );
                }
            }
            Panel::Bars { title, x_label, bins } => {
                let xr = range(bins.iter().flat_map(|b| [b.0, b.1]));
                let yr = (0.0, bins.iter().map(|b| b.2).fold(1.0, f64::max));
                axes(&mut out, x0, y0, PANEL_W, PANEL_H, xr, yr, title, x_label, "count");
                for (lo, hi, c) in bins {
                    let x = x0 + (lo - xr.0) / (xr.1 - xr.0) * PANEL_W;
                    let w = ((hi - lo) / (xr.1 - xr.0) * PANEL_W).max(1.0);
                    let h = c / yr.1 * PANEL_H;
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="#1f77b4" stroke="white" stroke-width="0.5"/>"##,
                        y0 + PANEL_H - h
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn plot_file(input: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    if !input.is_file() {
        return Err(malformed(format!("input `{}` not found", input.display())));
    }
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let svg = render_svg(&panels(kind, &text)?);
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
