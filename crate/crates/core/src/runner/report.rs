//! Report rows and their JSON, CSV and markdown renderings.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricName;
use crate::probe::{Aggregation, LayerMode};

/// Mean and spread of one (model, temporal support, aggregation, layer mode) cell over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub ts_seconds: f64,
    pub aggregation: Aggregation,
    pub layer_mode: LayerMode,
    pub metric_name: MetricName,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

/// A cell that produced no row. `skipped` marks cells whose temporal support
/// exceeds every clip, rendered as "-" rather than treated as errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub model_id: String,
    pub ts_seconds: f64,
    pub aggregation: Aggregation,
    pub layer_mode: LayerMode,
    pub skipped: bool,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            "md" | "markdown" => Some(Self::Markdown),
            _ => None,
        }
    }

    /// Format implied by a file extension.
    pub fn from_path(path: &std::path::Path) -> Option<Self> {
        path.extension().and_then(|e| e.to_str()).and_then(Self::parse)
    }
}

/// `0.869 ± 0.001` for mAP, `67.5 ± 0.2` (percent) for accuracy.
pub fn format_cell(metric: MetricName, mean: f64, std: f64) -> String {
    match metric {
        MetricName::Map => format!("{mean:.3} ± {std:.3}"),
        MetricName::Accuracy => format!("{:.1} ± {:.1}", mean * 100.0, std * 100.0),
    }
}

fn ts_label(ts: f64) -> String {
    format!("{ts}")
}

pub fn emit_report(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => rows_to_csv(&report.rows),
        ReportFormat::Markdown => to_markdown(report),
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("in-memory csv write");
    }
    if rows.is_empty() {
        writer
            .write_record([
                "model_id",
                "ts_seconds",
                "aggregation",
                "layer_mode",
                "metric_name",
                "mean",
                "std",
                "n_runs",
            ])
            .expect("in-memory csv write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8")
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// One line per (model, temporal support, layer mode) and one column per aggregation.
fn to_markdown(report: &Report) -> String {
    type Key = (String, u64, LayerMode);
    let key_of = |model: &str, ts: f64, mode: LayerMode| -> Key { (model.to_string(), ts.to_bits(), mode) };

    let mut aggregations = BTreeSet::new();
    let mut keys: Vec<(Key, f64)> = Vec::new();
    let mut push_key = |model: &str, ts: f64, mode: LayerMode, agg: Aggregation| {
        aggregations.insert(agg);
        let k = key_of(model, ts, mode);
        if !keys.iter().any(|(e, _)| *e == k) {
            keys.push((k, ts));
        }
    };
    for r in &report.rows {
        push_key(&r.model_id, r.ts_seconds, r.layer_mode, r.aggregation);
    }
    for f in &report.failures {
        push_key(&f.model_id, f.ts_seconds, f.layer_mode, f.aggregation);
    }
    keys.sort_by(|(a, ta), (b, tb)| ta.total_cmp(tb).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));

    let mut out = String::from("| Model | δt (s) | Layers |");
    for agg in &aggregations {
        write!(out, " {agg} |").unwrap();
    }
    out.push_str("\n|---|---|---|");
    for _ in &aggregations {
        out.push_str("---|");
    }
    out.push('\n');
    for ((model, ts_bits, mode), ts) in &keys {
        write!(out, "| {model} | {} | {mode} |", ts_label(*ts)).unwrap();
        for agg in &aggregations {
            let cell = report
                .rows
                .iter()
                .find(|r| {
                    r.model_id == *model
                        && r.ts_seconds.to_bits() == *ts_bits
                        && r.layer_mode == *mode
                        && r.aggregation == *agg
                })
                .map(|r| format_cell(r.metric_name, r.mean, r.std))
                .unwrap_or_else(|| "-".to_string());
            write!(out, " {cell} |").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(agg: Aggregation, metric: MetricName, mean: f64, std: f64, ts: f64) -> ReportRow {
        ReportRow {
            model_id: "beats".into(),
            ts_seconds: ts,
            aggregation: agg,
            layer_mode: LayerMode::Last,
            metric_name: metric,
            mean,
            std,
            n_runs: 5,
        }
    }

    #[test]
    fn cell_formatting_follows_table_conventions() {
        assert_eq!(format_cell(MetricName::Map, 0.8691, 0.0014), "0.869 ± 0.001");
        assert_eq!(format_cell(MetricName::Accuracy, 0.6750, 0.002), "67.5 ± 0.2");
        assert_eq!(format_cell(MetricName::Accuracy, 0.968, 0.002), "96.8 ± 0.2");
    }

    #[test]
    fn markdown_grid() {
        let report = Report {
            rows: vec![
                row(Aggregation::Mean, MetricName::Map, 0.8691, 0.0014, 5.0),
                row(Aggregation::Attention, MetricName::Map, 0.869, 0.001, 5.0),
                row(Aggregation::Mean, MetricName::Map, 0.852, 0.001, 1.0),
            ],
            failures: vec![CellFailure {
                model_id: "beats".into(),
                ts_seconds: 10.0,
                aggregation: Aggregation::Mean,
                layer_mode: LayerMode::Last,
                skipped: true,
                reason: "clips shorter than 10 s".into(),
            }],
        };
        let md = emit_report(&report, ReportFormat::Markdown);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Model | δt (s) | Layers | mean | attention |");
        assert_eq!(lines[2], "| beats | 1 | last | 0.852 ± 0.001 | - |");
        assert_eq!(lines[3], "| beats | 5 | last | 0.869 ± 0.001 | 0.869 ± 0.001 |");
        assert_eq!(lines[4], "| beats | 10 | last | - | - |");
    }

    #[test]
    fn json_csv_round_trip_is_exact() {
        let rows = vec![
            row(Aggregation::Mean, MetricName::Accuracy, 0.1 + 0.2, 1.0 / 3.0, 3.0),
            row(Aggregation::Attention, MetricName::Map, 0.869_123_456_789_012_3, 2e-17, 0.5),
        ];
        let report = Report { rows: rows.clone(), failures: vec![] };
        let json = emit_report(&report, ReportFormat::Json);
        let parsed: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
        let csv = emit_report(&parsed, ReportFormat::Csv);
        assert_eq!(rows_from_csv(&csv).unwrap(), rows);
        assert!(rows_from_csv(&rows_to_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn formats_from_names_and_paths() {
        assert_eq!(ReportFormat::parse("md"), Some(ReportFormat::Markdown));
        assert_eq!(ReportFormat::from_path(std::path::Path::new("out/report.csv")), Some(ReportFormat::Csv));
        assert_eq!(ReportFormat::parse("xml"), None);
    }
}
