//! Append-only metrics CSV.
//!
//! Schema version 1. Columns never change meaning within a version; a new
//! column means a new version.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;
pub const HEADER: &str = "run_id,dataset,depth,channels,gamma,seed,n_c,train_acc,test_acc,wall_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub dataset: String,
    pub depth: usize,
    pub channels: usize,
    pub gamma: f64,
    pub seed: u64,
    pub n_c: Option<usize>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_s: f64,
}

impl MetricsRecord {
    /// The CSV line without a trailing newline. Accuracies keep full
    /// precision so a later `eval` can be compared exactly.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{:e},{},{},{},{},{:.3}",
            self.run_id,
            self.dataset,
            self.depth,
            self.channels,
            self.gamma,
            self.seed,
            self.n_c.map_or_else(String::new, |n| n.to_string()),
            self.train_acc,
            self.test_acc,
            self.wall_s
        )
    }
}

/// Stable identifier for a run's settings and training data.
pub fn run_id(parts: &[&str]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain([0u8]) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Appends a record, writing the header first if the file is new or empty.
pub fn append(path: &Path, rec: &MetricsRecord) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{HEADER}")?;
    }
    writeln!(f, "{}", rec.to_line())
}
