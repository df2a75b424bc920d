//! Per-generation metrics records and Pareto-front files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fed::Traffic;

/// Crowding distances may be infinite, which JSON cannot express as a
/// number; infinity is written as the string `"inf"`.
mod distance {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Parent,
    Offspring,
}

/// One evaluated member of the combined parent and offspring population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub role: Role,
    pub key: String,
    pub genome: String,
    pub test_error: f64,
    pub macs: u64,
    pub rank: usize,
    #[serde(with = "distance")]
    pub crowding: f64,
}

/// A highlighted individual, by position in the record's `individuals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub key: String,
    pub test_error: f64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub generation: usize,
    /// Parents first, then offspring.
    pub individuals: Vec<IndividualRecord>,
    pub best_accuracy: Selection,
    pub knee: Selection,
    /// Training phases run this generation: two at the first, one after.
    pub training_phases: usize,
    pub participants: usize,
    pub group_size: usize,
    pub traffic: Traffic,
    pub master_version: u64,
}

/// Wall-clock timing, kept apart from the deterministic metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub generation: usize,
    pub mode: crate::config::RunMode,
    pub seconds: f64,
}

/// Line-delimited JSON writer.
pub struct JsonLines {
    out: BufWriter<File>,
    path: String,
}

impl JsonLines {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonLines {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// One row of a front file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub key: String,
    pub genome: String,
    pub test_error: f64,
    pub macs: u64,
    pub rank: usize,
    #[serde(with = "distance")]
    pub crowding: f64,
}

impl From<&IndividualRecord> for FrontRow {
    fn from(r: &IndividualRecord) -> Self {
        FrontRow {
            key: r.key.clone(),
            genome: r.genome.clone(),
            test_error: r.test_error,
            macs: r.macs,
            rank: r.rank,
            crowding: r.crowding,
        }
    }
}

/// Rows ordered by MACs, then error, then genome.
pub fn sort_front(rows: &mut [FrontRow]) {
    rows.sort_by(|a, b| {
        a.macs
            .cmp(&b.macs)
            .then(a.test_error.total_cmp(&b.test_error))
            .then_with(|| a.genome.cmp(&b.genome))
    });
}

/// Writes the front as CSV with a header row, in [`sort_front`] order.
pub fn export_front(rows: &[FrontRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = rows.to_vec();
    sort_front(&mut sorted);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in &sorted {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_front(path: impl AsRef<Path>) -> Result<Vec<FrontRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
