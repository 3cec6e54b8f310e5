//! Run-trace persistence and analysis artifacts.
//!
//! A run is stored as JSONL (one call record per line) plus a summary JSON.
//! From the JSONL alone this module derives CSV tables and static SVG charts:
//! the best-so-far curve, operator-usage bars, and the feature-usage
//! histogram. Artifact generation is a pure function of the record stream, so
//! re-running it yields byte-identical files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::expr::{parse_sequence, OperatorSet, Token};
use crate::pipeline::{BehaviorStats, CallRecord, RunReport, SIMPLE_OPERATORS};

// generous bound used when the original feature count is unknown; real
// sequences index far below it
const FEATURE_PARSE_BOUND: usize = 4096;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad JSON on line {line}: {source}")]
    BadLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("no records")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One JSON object per call, in (iteration, call) order.
pub fn write_jsonl(report: &RunReport, path: &Path) -> Result<(), ReportError> {
    let mut out = String::new();
    for record in &report.records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_summary(report: &RunReport, path: &Path) -> Result<(), ReportError> {
    let mut summary = serde_json::to_value(report).expect("report serializes");
    // the full trace lives in the JSONL; the summary keeps the aggregates
    summary.as_object_mut().unwrap().remove("records");
    if let Ok(stats) = behavior_stats_of(&report.records) {
        summary.as_object_mut().unwrap().insert(
            "behavior_stats".into(),
            serde_json::to_value(stats).expect("stats serialize"),
        );
    }
    let text = format!(
        "{}\n",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CallRecord>, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line).map_err(|source| ReportError::BadLine {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(records)
}

/// Usage statistics recomputed from raw records; the feature count is
/// inferred from the highest index any sequence touches.
pub fn behavior_stats_of(records: &[CallRecord]) -> Result<BehaviorStats, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let ops = OperatorSet::default();
    let mut operator_counts = std::collections::BTreeMap::new();
    let mut feature_counts: Vec<u64> = Vec::new();
    for record in records {
        let Some(text) = &record.sequence else {
            continue;
        };
        let Ok(seq) = parse_sequence(text, &ops, FEATURE_PARSE_BOUND) else {
            continue;
        };
        for comb in &seq.combinations {
            for tok in &comb.tokens {
                match tok {
                    Token::Feature(i) => {
                        if feature_counts.len() <= *i {
                            feature_counts.resize(i + 1, 0);
                        }
                        feature_counts[*i] += 1;
                    }
                    Token::Operator(name) => {
                        *operator_counts.entry(name.clone()).or_insert(0u64) += 1
                    }
                    _ => {}
                }
            }
        }
    }
    let total: u64 = operator_counts.values().sum();
    let simple: u64 = SIMPLE_OPERATORS
        .iter()
        .filter_map(|name| operator_counts.get(*name))
        .sum();
    let feat_total: u64 = feature_counts.iter().sum();
    let feature_usage_entropy = feature_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / feat_total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(BehaviorStats {
        operator_counts,
        simple_operator_ratio: if total == 0 {
            0.0
        } else {
            simple as f64 / total as f64
        },
        feature_counts,
        feature_usage_entropy,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Emits the CSV tables and SVG charts for a record stream into `out_dir`.
/// Returns the paths written. `best_so_far.csv` has exactly one row per call.
pub fn emit_artifacts(records: &[CallRecord], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stats = behavior_stats_of(records)?;
    let mut written = Vec::new();

    // row per call, no header: downstream tooling counts T*B rows
    let mut best_csv = String::new();
    for r in records {
        best_csv.push_str(&format!("{},{},{:.6}\n", r.iteration, r.call, r.best_so_far));
    }
    let p = out_dir.join("best_so_far.csv");
    write_file(&p, &best_csv)?;
    written.push(p);

    let mut op_csv = String::from("operator,count\n");
    for (name, count) in &stats.operator_counts {
        op_csv.push_str(&format!("{},{}\n", name, count));
    }
    let p = out_dir.join("operator_usage.csv");
    write_file(&p, &op_csv)?;
    written.push(p);

    let mut feat_csv = String::from("feature,count\n");
    for (i, count) in stats.feature_counts.iter().enumerate() {
        feat_csv.push_str(&format!("f{},{}\n", i + 1, count));
    }
    let p = out_dir.join("feature_usage.csv");
    write_file(&p, &feat_csv)?;
    written.push(p);

    let series: Vec<f64> = records.iter().map(|r| r.best_so_far).collect();
    let p = out_dir.join("best_so_far.svg");
    write_file(&p, &line_chart(&series, "best score so far"))?;
    written.push(p);

    let op_bars: Vec<(String, f64)> = stats
        .operator_counts
        .iter()
        .map(|(k, &v)| (k.clone(), v as f64))
        .collect();
    let p = out_dir.join("operator_usage.svg");
    write_file(&p, &bar_chart(&op_bars, "operator usage"))?;
    written.push(p);

    let feat_bars: Vec<(String, f64)> = stats
        .feature_counts
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("f{}", i + 1), v as f64))
        .collect();
    let p = out_dir.join("feature_usage.svg");
    write_file(&p, &bar_chart(&feat_bars, "feature usage"))?;
    written.push(p);

    Ok(written)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"16\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n"
        ),
        w = W,
        h = H,
        tx = W / 2.0,
        title = title,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
    )
}

/// Minimal line chart: one polyline over an auto-scaled y range.
pub fn line_chart(series: &[f64], title: &str) -> String {
    let mut svg = svg_open(title);
    if !series.is_empty() {
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
        let plot_w = W - 2.0 * MARGIN;
        let plot_h = H - 2.0 * MARGIN;
        let step = if series.len() > 1 {
            plot_w / (series.len() - 1) as f64
        } else {
            0.0
        };
        let points: Vec<String> = series
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = MARGIN + i as f64 * step;
                let y = H - MARGIN - (v - lo) / span * plot_h;
                format!("{:.2},{:.2}", x, y)
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"12\">{:.4}</text>\n",
            6.0, MARGIN + 4.0, hi
        ));
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"12\">{:.4}</text>\n",
            6.0,
            H - MARGIN,
            lo
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Minimal bar chart with per-bar labels under the axis.
pub fn bar_chart(bars: &[(String, f64)], title: &str) -> String {
    let mut svg = svg_open(title);
    if !bars.is_empty() {
        let hi = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1.0);
        let plot_w = W - 2.0 * MARGIN;
        let plot_h = H - 2.0 * MARGIN;
        let slot = plot_w / bars.len() as f64;
        let bar_w = slot * 0.8;
        for (i, (label, value)) in bars.iter().enumerate() {
            let x = MARGIN + i as f64 * slot + slot * 0.1;
            let bh = value / hi * plot_h;
            let y = H - MARGIN - bh;
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#ff7f0e\"/>\n",
                x, y, bar_w, bh
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.0}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
                 font-size=\"11\">{}</text>\n",
                x + bar_w / 2.0,
                H - MARGIN + 16.0,
                label
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            6.0,
            MARGIN + 4.0,
            hi
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
