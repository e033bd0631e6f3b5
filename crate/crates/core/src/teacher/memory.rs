use std::path::Path;

use serde::{Deserialize, Serialize};

use super::constraint::ConstraintRule;
use super::state::{cosine, StateVector};
use crate::error::{Error, Result};
use crate::sim::{Maneuver, ScenarioKind};

pub const MEMORY_CAPACITY: usize = 20;
pub const MAX_LESSON_CHARS: usize = 2000;
pub const MEMORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub z: StateVector,
    pub scenario_kind: ScenarioKind,
    pub action: Maneuver,
    pub outcome: Outcome,
    #[serde(rename = "return")]
    pub ret: f64,
    #[serde(default)]
    pub lesson: String,
    #[serde(default)]
    pub constraints: Vec<ConstraintRule>,
}

impl MemoryEntry {
    pub fn is_lesson(&self) -> bool {
        !self.lesson.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<'a> {
    pub index: usize,
    pub similarity: f64,
    pub entry: &'a MemoryEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRepository {
    entries: Vec<MemoryEntry>,
    capacity: usize,
}

#[derive(Serialize, Deserialize)]
struct MemoryFile {
    schema_version: u32,
    #[serde(default = "default_capacity")]
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

fn default_capacity() -> usize {
    MEMORY_CAPACITY
}

impl Default for MemoryRepository {
    fn default() -> Self {
        Self::new(MEMORY_CAPACITY)
    }
}

impl MemoryRepository {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Appends `entry`, evicting first when full: the non-lesson entry with
    /// the smallest |return| (oldest on ties), else the oldest entry.
    pub fn insert(&mut self, mut entry: MemoryEntry) {
        if entry.lesson.chars().count() > MAX_LESSON_CHARS {
            entry.lesson = entry.lesson.chars().take(MAX_LESSON_CHARS).collect();
        }
        while self.entries.len() >= self.capacity {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.is_lesson())
                .min_by(|a, b| a.1.ret.abs().total_cmp(&b.1.ret.abs()).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            self.entries.remove(victim);
        }
        self.entries.push(entry);
    }

    /// Top-`k` entries by cosine similarity, ties to the most recent.
    pub fn retrieve(&self, z: &StateVector, k: usize) -> Vec<Retrieved<'_>> {
        let mut scored: Vec<Retrieved<'_>> = self
            .entries
            .iter()
            .enumerate()
            .map(|(index, entry)| Retrieved {
                index,
                similarity: cosine(z.as_slice(), entry.z.as_slice()),
                entry,
            })
            .collect();
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(b.index.cmp(&a.index))
        });
        scored.truncate(k);
        scored
    }

    pub fn constraints(&self) -> impl Iterator<Item = &ConstraintRule> {
        self.entries.iter().flat_map(|e| e.constraints.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = MemoryFile {
            schema_version: MEMORY_SCHEMA_VERSION,
            capacity: self.capacity,
            entries: self.entries.clone(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::parse("memory file", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MemoryFile = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if file.schema_version != MEMORY_SCHEMA_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported memory schema_version {}", file.schema_version),
            ));
        }
        let mut m = Self::new(file.capacity);
        for e in file.entries {
            m.insert(e);
        }
        Ok(m)
    }
}
