use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read, write_atomic, Result, TOOL_VERSION};
use crate::ablation::AblationMode;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: AblationMode,
    pub author: String,
    pub seed: u64,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.mode, self.author, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Pending,
    Trained,
    Evaluated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub mode: AblationMode,
    pub author: String,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub final_train_loss: Option<f64>,
    #[serde(default)]
    pub converged: Option<bool>,
    #[serde(default)]
    pub error: Option<String>,
}

impl LedgerEntry {
    pub fn key(&self) -> CellKey {
        CellKey { mode: self.mode, author: self.author.clone(), seed: self.seed }
    }
}

/// One entry per grid cell, persisted as a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub tool_version: String,
    pub manifest_sha256: String,
    pub cells: BTreeMap<String, LedgerEntry>,
}

impl Ledger {
    /// Loads the ledger at `path`, adding pending entries for new cells.
    pub fn open(path: &Path, checksum: &str, grid: &[CellKey]) -> Result<Self> {
        let mut ledger = if path.is_file() {
            serde_json::from_slice(&read(path)?)?
        } else {
            Ledger { tool_version: TOOL_VERSION.into(), manifest_sha256: checksum.into(), cells: BTreeMap::new() }
        };
        ledger.manifest_sha256 = checksum.into();
        for key in grid {
            ledger.cells.entry(key.to_string()).or_insert_with(|| LedgerEntry {
                mode: key.mode,
                author: key.author.clone(),
                seed: key.seed,
                status: CellStatus::Pending,
                checkpoint: None,
                epochs: 0,
                final_train_loss: None,
                converged: None,
                error: None,
            });
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn get(&self, key: &CellKey) -> Option<&LedgerEntry> {
        self.cells.get(&key.to_string())
    }

    pub fn status(&self, key: &CellKey) -> CellStatus {
        self.get(key).map_or(CellStatus::Pending, |e| e.status)
    }

    /// Applies `f` to the entry. Status only moves forward
    /// (pending → trained → evaluated) unless `force` is set; failures may be
    /// recorded from pending and retried later.
    pub fn update(&mut self, key: &CellKey, force: bool, f: impl FnOnce(&mut LedgerEntry)) {
        let Some(entry) = self.cells.get_mut(&key.to_string()) else { return };
        let before = entry.status;
        let mut next = entry.clone();
        f(&mut next);
        let allowed = force
            || next.status == before
            || matches!(
                (before, next.status),
                (CellStatus::Pending, _) | (CellStatus::Failed, _) | (CellStatus::Trained, CellStatus::Evaluated)
            );
        if allowed {
            *entry = next;
        } else {
            log::warn!("ledger: refusing {key} transition {before:?} -> {:?} without --force", next.status);
        }
    }
}
