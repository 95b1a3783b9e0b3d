//! Training metric records and their JSONL serialization.
//!
//! One JSON object per line, fields in declaration order, floats printed by
//! serde_json's shortest-round-trip formatter — rewriting the same records
//! yields byte-identical files, which the rerun-determinism guarantees
//! build on.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

/// Per-epoch Stage-1 record.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Stage1EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_node: f64,
    pub loss_edge: f64,
    pub kl: f64,
    pub tau: f64,
    pub perplexity: f64,
    pub usage: f64,
}

/// Per-epoch Stage-2 record.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Stage2EpochMetrics {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub loss_kl: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Final evaluation summary.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FinalReport {
    pub test_acc: f64,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

/// Writes one JSON object per record, newline-terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)
}
