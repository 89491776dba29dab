//! Packet traces and the CSV files written for a scenario run.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScenarioRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

/// One packet seen entering or leaving the balancer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub direction: Direction,
    pub timestamp_ns: u64,
    /// Empty for packets whose header does not parse.
    pub event_number: Option<u64>,
    pub entropy: Option<u16>,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub size: usize,
}

/// Packets per (time bucket, source, destination node, epoch).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub bucket_start_ns: u64,
    pub daq: u16,
    pub cn: u16,
    pub epoch: u32,
    pub packets: u64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

/// Reads a trace written by [`write_outputs`].
pub fn read_trace(path: &Path) -> io::Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Writes `report.json`, `trace_in.csv`, `trace_out.csv` and
/// `timeline.csv` into `dir`, creating it if needed.
pub fn write_outputs(run: &ScenarioRun, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&run.report)?;
    fs::write(dir.join("report.json"), json + "\n")?;
    write_csv(&dir.join("trace_in.csv"), &run.trace_in)?;
    write_csv(&dir.join("trace_out.csv"), &run.trace_out)?;
    write_csv(&dir.join("timeline.csv"), &run.timeline)?;
    Ok(())
}
