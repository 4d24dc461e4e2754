//! Comparison tables and per-replication exports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::simulate::{relative_improvement, MethodComparison, ReplicationRecord};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

const BASE_COLUMNS: [&str; 9] = ["method", "reps", "mse", "ci_low", "ci_high", "mean_se", "bias", "bias_se", "coverage"];

fn header_row(baselines: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for b in baselines {
        cols.push(format!("mse_improvement_vs_{b}"));
        cols.push(format!("se_improvement_vs_{b}"));
    }
    cols
}

fn table(comparison: &MethodComparison, baselines: &[String]) -> Result<Vec<Vec<String>>, HarnessError> {
    if comparison.rows.is_empty() {
        return Err(HarnessError::EmptyComparison);
    }
    let base_rows = baselines
        .iter()
        .map(|b| comparison.get(b).ok_or_else(|| HarnessError::UnknownBaseline(b.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(comparison
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.method.clone(),
                r.reps.to_string(),
                r.mse.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.mean_se.to_string(),
                r.bias.to_string(),
                r.bias_se.to_string(),
                r.coverage.to_string(),
            ];
            for b in &base_rows {
                row.push(relative_improvement(b.mse, r.mse).to_string());
                row.push(relative_improvement(b.mean_se, r.mean_se).to_string());
            }
            row
        })
        .collect())
}

/// Renders the comparison. Improvement columns are `(A - B) / A * 100`
/// against each baseline `A`. `header` becomes a leading comment line;
/// `notes` are appended below the markdown table.
pub fn render_report(
    comparison: &MethodComparison,
    baselines: &[String],
    format: ReportFormat,
    header: Option<&str>,
    notes: &[String],
) -> Result<String, HarnessError> {
    let rows = table(comparison, baselines)?;
    let cols = header_row(baselines);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            if let Some(h) = header {
                writeln!(out, "# {h}").expect("string write");
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&cols)?;
            for r in &rows {
                w.write_record(r)?;
            }
            out.push_str(&String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"));
        }
        ReportFormat::Markdown => {
            if let Some(h) = header {
                writeln!(out, "<!-- {h} -->").expect("string write");
            }
            writeln!(out, "| {} |", cols.join(" | ")).expect("string write");
            writeln!(out, "|{}", "---|".repeat(cols.len())).expect("string write");
            for r in &rows {
                writeln!(out, "| {} |", r.join(" | ")).expect("string write");
            }
            if !comparison.failures.is_empty() || !notes.is_empty() {
                out.push('\n');
            }
            for (method, err) in &comparison.failures {
                writeln!(out, "- excluded `{method}`: {err}").expect("string write");
            }
            for note in notes {
                writeln!(out, "- {note}").expect("string write");
            }
        }
    }
    Ok(out)
}

pub fn emit_report(
    comparison: &MethodComparison,
    baselines: &[String],
    format: ReportFormat,
    path: &Path,
    header: Option<&str>,
    notes: &[String],
) -> Result<(), HarnessError> {
    let text = render_report(comparison, baselines, format, header, notes)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn write_replications(records: &[ReplicationRecord], path: &Path, header: Option<&str>) -> Result<(), HarnessError> {
    let mut file = fs::File::create(path)?;
    if let Some(h) = header {
        writeln!(file, "# {h}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by `write_replications`, skipping comment lines.
pub fn read_replications(path: &Path) -> Result<Vec<ReplicationRecord>, HarnessError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut body = String::new();
    for line in reader.lines() {
        let line = line?;
        if !line.starts_with('#') {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.deserialize().collect::<Result<Vec<ReplicationRecord>, _>>().map_err(|e| HarnessError::Parse(e.to_string()))
}
