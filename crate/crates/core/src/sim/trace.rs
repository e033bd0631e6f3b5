use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Event, Maneuver, ScenarioKind, VehicleState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub heading: f64,
    pub lane: i32,
    pub length: f64,
    pub width: f64,
}

impl From<&VehicleState> for VehicleRecord {
    fn from(v: &VehicleState) -> Self {
        Self {
            id: v.id,
            x: v.x,
            y: v.y,
            speed: v.speed,
            heading: v.heading,
            lane: v.lane,
            length: v.length,
            width: v.width,
        }
    }
}

/// One line of a JSONL trace: the state at decision step `t` and, when
/// known, the maneuver taken from it and its immediate result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub scenario: ScenarioKind,
    pub ego: VehicleRecord,
    #[serde(default)]
    pub neighbors: Vec<VehicleRecord>,
    #[serde(default)]
    pub maneuver: Option<Maneuver>,
    #[serde(default)]
    pub reward: Option<f64>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub tau_min: Option<f64>,
}

impl TraceRecord {
    pub fn read_jsonl(path: &FsPath) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string())
                })
            })
            .collect()
    }
}

pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &FsPath) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::parse("trace record", e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
