//! CSV tables and the run manifest.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use splitmpc::control::{ClosedLoopLog, SampleMode, SampleRecord};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn config_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{}", i + 1))
}

pub fn closed_loop_table(log: &ClosedLoopLog, nx: usize, nu: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["sample".to_string(), "mode".to_string()];
    header.extend(names("x", nx));
    header.extend(names("u", nu));
    header.extend(["V_gamma", "V_star", "gap", "cert_pass"].map(String::from));
    let rows = log
        .samples
        .iter()
        .map(|s| {
            let mut r = vec![s.sample.to_string(), s.mode.as_str().to_string()];
            r.extend(s.state.iter().map(|v| num(*v)));
            r.extend(s.input.iter().map(|v| num(*v)));
            r.push(opt(s.cost));
            r.push(opt(s.oracle_cost));
            r.push(opt(s.gap));
            r.push(s.certified.to_string());
            r
        })
        .collect();
    (header, rows)
}

/// Per-stage mismatch of one MPC sample against its drift bound.
pub fn mismatch_rows(rec: &SampleRecord, with_sample: bool) -> Vec<Vec<String>> {
    let (Some(traj), Some(ledger)) = (&rec.trajectory, &rec.ledger) else {
        return Vec::new();
    };
    traj.mismatch()
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let mut r = Vec::with_capacity(m.len() + 3);
            if with_sample {
                r.push(rec.sample.to_string());
            }
            r.push(t.to_string());
            r.extend(m.iter().map(|v| num(*v)));
            r.push(num(ledger.drift[t]));
            r
        })
        .collect()
}

pub fn mismatch_header(nx: usize, with_sample: bool) -> Vec<String> {
    let mut h = Vec::new();
    if with_sample {
        h.push("sample".to_string());
    }
    h.push("t".to_string());
    h.extend((0..nx).map(|i| format!("dx{}", i + 1)));
    h.push("alpha_t".to_string());
    h
}

pub fn first_mpc(log: &ClosedLoopLog) -> Option<&SampleRecord> {
    log.samples.iter().find(|s| s.mode == SampleMode::Mpc)
}

#[derive(Debug, Serialize)]
pub struct Manifest<T: Serialize> {
    pub schema_version: u32,
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: splitmpc::dfg::Mode,
    pub oracle: bool,
    pub status: String,
    pub outputs: Vec<String>,
    pub timing: serde_json::Value,
    pub data: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
