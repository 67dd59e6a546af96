//! Communication-cost accounting and CSV/JSON metrics emission.
//!
//! CSV column order is fixed:
//! `round,test_accuracy,noisy_val_score,epsilon,comm_bits_cumulative,retention_p,scheme,seed`.
//! Floats are written with 17 significant digits so both formats round-trip
//! losslessly.

use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "round,test_accuracy,noisy_val_score,epsilon,comm_bits_cumulative,retention_p,scheme,seed";

/// One metrics row per communication round.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub test_accuracy: f64,
    pub noisy_val_score: f64,
    pub epsilon: f64,
    pub comm_bits_cumulative: f64,
    pub retention_p: f64,
    pub scheme: String,
    pub seed: u64,
}

/// Per-client communication bits over a whole run:
/// `direction_factor * p * d * 32 * rounds * q`. A factor of 2 counts
/// upload and download, 1 counts upload only.
pub fn comm_cost_bits(p: f64, d: usize, rounds: usize, q: f64, direction_factor: u8) -> f64 {
    assert!(p >= 0.0 && q >= 0.0, "inputs must be nonnegative");
    assert!(matches!(direction_factor, 1 | 2), "factor must be 1 or 2");
    direction_factor as f64 * p * d as f64 * 32.0 * rounds as f64 * q
}

/// 17-significant-digit float formatting (lossless for f64).
fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::invalid(format!("bad float '{s}' in metrics"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for MetricsFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "json" => Ok(MetricsFormat::Json),
            other => Err(Error::invalid(format!("unknown metrics format '{other}'"))),
        }
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round,
            fmt_f64(r.test_accuracy),
            fmt_f64(r.noisy_val_score),
            fmt_f64(r.epsilon),
            fmt_f64(r.comm_bits_cumulative),
            fmt_f64(r.retention_p),
            r.scheme,
            r.seed
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::invalid(format!("bad metrics header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::invalid(format!(
                "metrics line {}: expected 8 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        rows.push(MetricsRow {
            round: fields[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad round '{}'", fields[0])))?,
            test_accuracy: parse_f64(fields[1])?,
            noisy_val_score: parse_f64(fields[2])?,
            epsilon: parse_f64(fields[3])?,
            comm_bits_cumulative: parse_f64(fields[4])?,
            retention_p: parse_f64(fields[5])?,
            scheme: fields[6].to_string(),
            seed: fields[7]
                .parse()
                .map_err(|_| Error::invalid(format!("bad seed '{}'", fields[7])))?,
        });
    }
    Ok(rows)
}

/// JSON rendering is hand-rolled with the same float formatting so the two
/// formats stay byte-stable and mutually consistent.
pub fn render_json(rows: &[MetricsRow]) -> String {
    let mut out = String::from("[\n");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "  {{\"round\": {}, \"test_accuracy\": \"{}\", \"noisy_val_score\": \"{}\", \
             \"epsilon\": \"{}\", \"comm_bits_cumulative\": \"{}\", \"retention_p\": \"{}\", \
             \"scheme\": \"{}\", \"seed\": {}}}{}\n",
            r.round,
            fmt_f64(r.test_accuracy),
            fmt_f64(r.noisy_val_score),
            fmt_f64(r.epsilon),
            fmt_f64(r.comm_bits_cumulative),
            fmt_f64(r.retention_p),
            r.scheme,
            r.seed,
            if i + 1 == rows.len() { "" } else { "," }
        ));
    }
    out.push_str("]\n");
    out
}

pub fn parse_json(text: &str) -> Result<Vec<MetricsRow>> {
    #[derive(serde::Deserialize)]
    struct RawRow {
        round: u64,
        test_accuracy: String,
        noisy_val_score: String,
        epsilon: String,
        comm_bits_cumulative: String,
        retention_p: String,
        scheme: String,
        seed: u64,
    }
    let raw: Vec<RawRow> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|r| {
            Ok(MetricsRow {
                round: r.round,
                test_accuracy: parse_f64(&r.test_accuracy)?,
                noisy_val_score: parse_f64(&r.noisy_val_score)?,
                epsilon: parse_f64(&r.epsilon)?,
                comm_bits_cumulative: parse_f64(&r.comm_bits_cumulative)?,
                retention_p: parse_f64(&r.retention_p)?,
                scheme: r.scheme,
                seed: r.seed,
            })
        })
        .collect()
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path, format: MetricsFormat) -> Result<()> {
    let text = match format {
        MetricsFormat::Csv => render_csv(rows),
        MetricsFormat::Json => render_json(rows),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<MetricsRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    match format {
        MetricsFormat::Csv => parse_csv(&text),
        MetricsFormat::Json => parse_json(&text),
    }
}
