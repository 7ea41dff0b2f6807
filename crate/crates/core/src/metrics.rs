//! Metrics stream: newline-delimited JSON plus a flat CSV mirror.
//!
//! Records carry no wall-clock data so identical runs give identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// CSV columns after `step,kind`.
pub const CSV_FIELDS: &[&str] = &[
    "env_steps",
    "grad_steps",
    "episode_return",
    "eval_return",
    "eval_return_std",
    "tpc",
    "consistency",
    "spc",
    "reward_ll",
    "objective",
    "latent_std",
    "min_latent_std",
    "actor_loss",
    "value_loss",
    "mean_value_target",
    "wm_grad_norm",
    "actor_grad_norm",
    "value_grad_norm",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub kind: String,
    #[serde(flatten)]
    pub fields: BTreeMap<String, f64>,
}

impl Record {
    pub fn new(step: u64, kind: impl Into<String>) -> Self {
        Self {
            step,
            kind: kind.into(),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.fields.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.get(key).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn to_csv_row(&self) -> String {
        let mut row = format!("{},{}", self.step, self.kind);
        for f in CSV_FIELDS {
            row.push(',');
            if let Some(v) = self.fields.get(*f) {
                row.push_str(&v.to_string());
            }
        }
        row
    }
}

pub fn csv_header() -> String {
    let mut h = String::from("step,kind");
    for f in CSV_FIELDS {
        h.push(',');
        h.push_str(f);
    }
    h
}

/// Destination for metric records.
pub trait MetricsSink {
    fn emit(&mut self, record: &Record) -> Result<()>;
}

impl MetricsSink for Vec<Record> {
    fn emit(&mut self, record: &Record) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn emit(&mut self, _: &Record) -> Result<()> {
        Ok(())
    }
}

/// Writes `metrics.jsonl` and `metrics.csv` into a run directory.
pub struct FileSink {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
}

impl FileSink {
    pub fn create(dir: &Path) -> Result<Self> {
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(csv, "{}", csv_header())?;
        Ok(Self { jsonl, csv })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

impl MetricsSink for FileSink {
    fn emit(&mut self, record: &Record) -> Result<()> {
        writeln!(self.jsonl, "{}", record.to_json()?)?;
        writeln!(self.csv, "{}", record.to_csv_row())?;
        self.flush()
    }
}

/// Parses the CSV mirror back into records (empty cells are skipped).
pub fn read_csv(text: &str) -> Vec<Record> {
    let mut lines = text.lines();
    let header: Vec<&str> = match lines.next() {
        Some(h) => h.split(',').collect(),
        None => return Vec::new(),
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            let mut r = Record::new(cells[0].parse().unwrap_or(0), cells.get(1).copied().unwrap_or(""));
            for (name, cell) in header.iter().zip(&cells).skip(2) {
                if let Ok(v) = cell.parse::<f64>() {
                    r.fields.insert(name.to_string(), v);
                }
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_agree() {
        let r = Record::new(7, "train").with("tpc", 1.25).with("latent_std", 0.5).with("extra", 3.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["step"], 7);
        assert_eq!(json["kind"], "train");
        assert_eq!(json["tpc"], 1.25);
        let parsed = read_csv(&format!("{}\n{}\n", csv_header(), r.to_csv_row()));
        assert_eq!(parsed.len(), 1);
        for (k, v) in &parsed[0].fields {
            assert_eq!(r.get(k), Some(*v));
        }
        assert_eq!(parsed[0].get("tpc"), Some(1.25));
        assert_eq!(parsed[0].get("extra"), None);
    }

    #[test]
    fn floats_round_trip_exactly() {
        let x = 0.1 + 0.2;
        let r = Record::new(0, "k").with("tpc", x);
        let parsed = read_csv(&format!("{}\n{}\n", csv_header(), r.to_csv_row()));
        assert_eq!(parsed[0].get("tpc").unwrap().to_bits(), x.to_bits());
    }
}
