//! Metrics, per-generator reports, robustness sweeps and feature
//! diagnostics.

pub mod diag;
pub mod metrics;
pub mod report;
pub mod sweep;

pub use diag::{cosine_histogram, embedding_stats, CategoryStats, CosineHistogram, LabelledFeature};
pub use metrics::{accuracy_breakdown, auroc, average_precision, AccuracyBreakdown, ScoredSample, THRESHOLD};
pub use report::{column_order, parse_markdown, render, table, EvalReport, GeneratorMetrics, Means, ReportFormat, Table, TableKind};
pub use sweep::{evaluate, robustness_sweep, score_samples, sweep_csv, Scorer, SweepKind, SweepPoint};
