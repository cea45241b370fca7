//! Trajectory records and their line-delimited JSON files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// One unit's observed path. Index `t` holds the treatment `a[t]` that produced
/// outcome `y[t]` from the previous step; `a[0]` is the no-treatment class for
/// simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    #[serde(rename = "Y")]
    pub y: Vec<Vec<f64>>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(rename = "length")]
    pub len: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn dim_y(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    pub fn dim_x(&self) -> usize {
        self.x
            .as_ref()
            .and_then(|x| x.first())
            .map_or(0, Vec::len)
    }

    /// Checks internal consistency against the expected schema.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let bad = |what: &str| {
            Err(CoreError::Format(format!(
                "trajectory {}: {what}",
                self.id
            )))
        };
        if self.len == 0 || self.a.len() != self.len || self.y.len() != self.len {
            return bad("array lengths disagree with active length");
        }
        if self.v.len() != schema.dim_v {
            return bad("static covariate dimension mismatch");
        }
        if self.y.iter().any(|y| y.len() != schema.dim_y) {
            return bad("outcome dimension mismatch");
        }
        if self.a.iter().any(|&a| a >= schema.num_treatments) {
            return bad("treatment index out of range");
        }
        match (&self.x, schema.dim_x) {
            (None, 0) => {}
            (Some(x), d) if d > 0 => {
                if x.len() != self.len || x.iter().any(|r| r.len() != d) {
                    return bad("covariate dimension mismatch");
                }
            }
            _ => return bad("covariates present in only some of schema/record"),
        }
        let finite = self.v.iter().all(|v| v.is_finite())
            && self.y.iter().flatten().all(|v| v.is_finite())
            && self.x.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return bad("non-finite values");
        }
        Ok(())
    }
}

/// Dimensions shared by every trajectory of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub dim_v: usize,
    pub dim_y: usize,
    pub dim_x: usize,
    pub num_treatments: usize,
    pub max_len: usize,
}

impl Schema {
    pub fn has_x(&self) -> bool {
        self.dim_x > 0
    }
}

/// Metadata written next to the split files of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub simulator: String,
    pub schema: Schema,
    /// Outcomes are divided by this before entering the network.
    pub outcome_scale: f64,
    /// Reported RMSE is `rmse_factor` times the RMSE in native units.
    pub rmse_factor: f64,
    pub splits: Vec<SplitInfo>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub units: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CoreError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads one split and validates every record against `schema`.
pub fn load_split(path: &Path, schema: &Schema) -> Result<Vec<Trajectory>> {
    let trajectories: Vec<Trajectory> = read_jsonl(path)?;
    for t in &trajectories {
        t.validate(schema)?;
    }
    Ok(trajectories)
}
