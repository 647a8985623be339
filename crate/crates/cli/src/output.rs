//! Files written per run. Column order and key names are part of the
//! command-line contract.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cbc_core::sim::{AttackReport, Metrics, SimConfig, TranscriptEntry};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct MetricsRow {
    pub n: u16,
    pub p_c: f64,
    pub g: f64,
    pub requests: u64,
    pub gossips: u64,
    pub tasks: u64,
    pub mean_gap: f64,
    pub p99_gap: u64,
}

impl MetricsRow {
    pub fn new(cfg: &SimConfig, m: &Metrics) -> Self {
        MetricsRow {
            n: cfg.n,
            p_c: cfg.p_c,
            g: cfg.g,
            requests: m.requests(),
            gossips: m.gossips(),
            tasks: m.tasks_started,
            mean_gap: m.mean_gap(),
            p99_gap: m.gap_percentile(0.99),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ForgeRow {
    pub p_target: f64,
    pub q: u16,
    pub r: u16,
    pub controlled: u16,
    pub m: u16,
    pub closed_form: f64,
    pub empirical: f64,
    pub bound: f64,
    pub requests: u64,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io(path))
}

pub fn write_gaps(path: &Path, m: &Metrics) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    writeln!(w, "gap,frequency").map_err(io(path))?;
    for (gap, freq) in &m.gap_histogram {
        writeln!(w, "{gap},{freq}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn write_transcript(path: &Path, entries: &[TranscriptEntry]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn write_report(path: &Path, report: &AttackReport) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io(path))
}
