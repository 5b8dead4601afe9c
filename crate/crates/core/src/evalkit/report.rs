use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy_breakdown, auroc, average_precision, ScoredSample, THRESHOLD};
use crate::datasets::Label;
use crate::error::{config_err, Result, SddError};

/// Generator columns of the GAN/diffusion benchmark, in table order.
pub const UNIVFD_ORDER: &[&str] = &[
    "progan",
    "cyclegan",
    "biggan",
    "stylegan",
    "gaugan",
    "stargan",
    "deepfake",
    "sitd",
    "san",
    "crn",
    "imle",
    "guided",
    "ldm_200",
    "ldm_200_cfg",
    "ldm_100",
    "glide_100_27",
    "glide_50_27",
    "glide_100_10",
    "dalle",
];

/// Text-to-image generators of the second benchmark, in table order.
pub const SYNRIS_ORDER: &[&str] = &[
    "kandinsky2",
    "kandinsky3",
    "pixart-α",
    "sdxl-dpo",
    "segmind-vega",
    "sdxl",
    "seg-moe",
    "ssd-1b",
    "stable-cascade",
    "würstchen2",
    "midjourney",
    "playground",
    "dalle3",
];

/// Folds case and separators so `LDM-200` and `ldm_200` match.
fn canonical(tag: &str) -> String {
    tag.to_lowercase().replace(['-', ' '], "_")
}

/// Benchmark order when every tag belongs to one known benchmark,
/// alphabetical otherwise.
pub fn column_order(tags: &[String]) -> Vec<String> {
    for order in [UNIVFD_ORDER, SYNRIS_ORDER] {
        let pos = |t: &String| order.iter().position(|o| canonical(o) == canonical(t));
        if !tags.is_empty() && tags.iter().all(|t| pos(t).is_some()) {
            let mut v = tags.to_vec();
            v.sort_by_key(|t| pos(t));
            return v;
        }
    }
    let mut v = tags.to_vec();
    v.sort();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub ap: f64,
    pub acc: f64,
    pub auroc: f64,
    pub racc: f64,
    pub facc: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub ap: f64,
    pub acc: f64,
    pub auroc: f64,
    pub racc: f64,
    pub facc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-generator metrics in column order.
    pub generators: Vec<(String, GeneratorMetrics)>,
    /// Unweighted means over generators.
    pub means: Means,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_scored(samples: &[ScoredSample], config_digest: &str) -> Result<Self> {
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
        for s in samples {
            let g = groups.entry(s.generator.as_str()).or_default();
            g.0.push(s.score);
            g.1.push(s.label);
        }
        if groups.is_empty() {
            return Err(SddError::UndefinedMetric("no scored samples".into()));
        }
        let tags: Vec<String> = groups.keys().map(|k| k.to_string()).collect();
        let mut generators = Vec::with_capacity(tags.len());
        for tag in column_order(&tags) {
            let (scores, labels) = &groups[tag.as_str()];
            let b = accuracy_breakdown(scores, labels, THRESHOLD)?;
            let m = GeneratorMetrics {
                ap: average_precision(scores, labels)
                    .map_err(|e| SddError::UndefinedMetric(format!("{tag}: {e}")))?,
                acc: b.acc,
                auroc: auroc(scores, labels)?,
                racc: b.racc,
                facc: b.facc,
                n_real: b.n_real,
                n_fake: b.n_fake,
            };
            generators.push((tag, m));
        }
        let n = generators.len() as f64;
        let mean = |f: fn(&GeneratorMetrics) -> f64| generators.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let means = Means {
            ap: mean(|m| m.ap),
            acc: mean(|m| m.acc),
            auroc: mean(|m| m.auroc),
            racc: mean(|m| m.racc),
            facc: mean(|m| m.facc),
        };
        Ok(Self {
            generators,
            means,
            config_digest: config_digest.to_string(),
        })
    }

    pub fn get(&self, generator: &str) -> Option<&GeneratorMetrics> {
        self.generators.iter().find(|(g, _)| g == generator).map(|(_, m)| m)
    }
}

/// Table layouts of the published results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    /// One row, generator columns, `mAP` last.
    Ap,
    /// One row, generator columns, `Avg-acc` last.
    Acc,
    /// One row per generator, closing `Average` row.
    Auroc,
    Racc,
    Facc,
    /// Every metric per generator, closing `Mean` row.
    Full,
}

impl FromStr for TableKind {
    type Err = SddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap" => Ok(Self::Ap),
            "acc" => Ok(Self::Acc),
            "auroc" => Ok(Self::Auroc),
            "racc" => Ok(Self::Racc),
            "facc" => Ok(Self::Facc),
            "full" => Ok(Self::Full),
            other => Err(config_err(format!("unknown table `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Jsonl,
}

impl FromStr for ReportFormat {
    type Err = SddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(config_err(format!("unknown report format `{other}`"))),
        }
    }
}

/// A rendered table: header cells and labelled rows of percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

fn pct(v: f64) -> f64 {
    (v * 10000.0).round() / 100.0
}

pub fn table(report: &EvalReport, kind: TableKind, method: &str) -> Table {
    let gens = &report.generators;
    let single_row = |label: &str, f: fn(&GeneratorMetrics) -> f64, mean: f64| {
        let mut header = vec!["Method".to_string()];
        header.extend(gens.iter().map(|(g, _)| g.clone()));
        header.push(label.to_string());
        let mut vals: Vec<f64> = gens.iter().map(|(_, m)| pct(f(m))).collect();
        vals.push(pct(mean));
        Table {
            header,
            rows: vec![(method.to_string(), vals)],
        }
    };
    match kind {
        TableKind::Ap => single_row("mAP", |m| m.ap, report.means.ap),
        TableKind::Acc => single_row("Avg-acc", |m| m.acc, report.means.acc),
        TableKind::Racc => single_row("Avg-racc", |m| m.racc, report.means.racc),
        TableKind::Facc => single_row("Avg-facc", |m| m.facc, report.means.facc),
        TableKind::Auroc => {
            let mut rows: Vec<(String, Vec<f64>)> =
                gens.iter().map(|(g, m)| (g.clone(), vec![pct(m.auroc)])).collect();
            rows.push(("Average".into(), vec![pct(report.means.auroc)]));
            Table {
                header: vec!["Generator".into(), method.to_string()],
                rows,
            }
        }
        TableKind::Full => {
            let mut rows: Vec<(String, Vec<f64>)> = gens
                .iter()
                .map(|(g, m)| (g.clone(), vec![pct(m.ap), pct(m.acc), pct(m.auroc), pct(m.racc), pct(m.facc)]))
                .collect();
            let a = &report.means;
            rows.push(("Mean".into(), vec![pct(a.ap), pct(a.acc), pct(a.auroc), pct(a.racc), pct(a.facc)]));
            Table {
                header: ["Generator", "AP", "Acc", "AUROC", "rAcc", "fAcc"]
                    .map(String::from)
                    .to_vec(),
                rows,
            }
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders a report. Tables hold percentages with two decimals; JSON lines
/// hold raw fractions, one object per generator plus a `mean` line.
pub fn render(report: &EvalReport, kind: TableKind, format: ReportFormat, method: &str) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Jsonl => {
            for (g, m) in &report.generators {
                let mut v = serde_json::to_value(m)?;
                v["generator"] = g.clone().into();
                v["config_digest"] = report.config_digest.clone().into();
                writeln!(out, "{v}").unwrap();
            }
            let mut v = serde_json::to_value(report.means)?;
            v["generator"] = "mean".into();
            v["config_digest"] = report.config_digest.clone().into();
            writeln!(out, "{v}").unwrap();
        }
        ReportFormat::Csv => {
            let t = table(report, kind, method);
            let header: Vec<String> = t.header.iter().map(|h| csv_field(h)).collect();
            writeln!(out, "{}", header.join(",")).unwrap();
            for (label, vals) in &t.rows {
                let cells: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
                writeln!(out, "{},{}", csv_field(label), cells.join(",")).unwrap();
            }
        }
        ReportFormat::Markdown => {
            let t = table(report, kind, method);
            writeln!(out, "| {} |", t.header.join(" | ")).unwrap();
            let rule: Vec<&str> = t.header.iter().enumerate().map(|(i, _)| if i == 0 { ":--" } else { "--:" }).collect();
            writeln!(out, "| {} |", rule.join(" | ")).unwrap();
            for (label, vals) in &t.rows {
                let cells: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
                writeln!(out, "| {} | {} |", label, cells.join(" | ")).unwrap();
            }
        }
    }
    Ok(out)
}

/// Parses a markdown table produced by [`render`].
pub fn parse_markdown(text: &str) -> Result<Table> {
    let err = |line: usize, m: &str| SddError::Parse {
        path: "<markdown>".into(),
        line,
        message: m.to_string(),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let split = |l: &str| -> Vec<String> {
        l.trim()
            .trim_start_matches('|')
            .trim_end_matches('|')
            .split('|')
            .map(|c| c.trim().to_string())
            .collect()
    };
    let (_, head) = lines.next().ok_or_else(|| err(1, "empty table"))?;
    let header = split(head);
    lines.next().ok_or_else(|| err(2, "missing rule line"))?;
    let mut rows = Vec::new();
    for (i, l) in lines {
        let cells = split(l);
        if cells.len() != header.len() {
            return Err(err(i + 1, "row width differs from header"));
        }
        let vals = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| err(i + 1, &format!("not a number: `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((cells[0].clone(), vals));
    }
    Ok(Table { header, rows })
}
