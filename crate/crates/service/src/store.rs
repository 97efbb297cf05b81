//! File-backed content-addressed store: every object is saved under the
//! SHA-256 of its bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use whatif_core::model::Checkpoint;
use whatif_core::table::{ColumnKind, SampleTable};

use crate::error::{Result, ServiceError};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A dataset as persisted: CSV text plus the column kinds in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDataset {
    pub kinds: Vec<(String, ColumnKind)>,
    pub csv: String,
}

impl StoredDataset {
    pub fn from_table(table: &SampleTable) -> Self {
        StoredDataset {
            kinds: table.columns().iter().map(|c| (c.name.clone(), c.kind)).collect(),
            csv: table.to_csv_string(),
        }
    }

    pub fn table(&self) -> Result<SampleTable> {
        let mut table = SampleTable::read_csv(self.csv.as_bytes())?;
        for (c, (name, kind)) in self.kinds.iter().enumerate() {
            if table.columns().get(c).map(|col| &col.name) != Some(name) {
                return Err(ServiceError::Internal(format!("stored schema disagrees at column '{name}'")));
            }
            table.set_kind(c, *kind)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

const DATASETS: &str = "datasets";
const CHECKPOINTS: &str = "checkpoints";

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        for dir in [DATASETS, CHECKPOINTS] {
            std::fs::create_dir_all(root.join(dir))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, area: &str, id: &str) -> Result<PathBuf> {
        let valid = id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !valid {
            return Err(ServiceError::NotFound(format!("{area} '{id}'")));
        }
        Ok(self.root.join(area).join(id))
    }

    fn put(&self, area: &str, bytes: &[u8]) -> Result<String> {
        let id = sha256_hex(bytes);
        let path = self.path(area, &id)?;
        if !path.exists() {
            let tmp = path.with_extension("partial");
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(id)
    }

    fn get(&self, area: &str, id: &str) -> Result<Vec<u8>> {
        let path = self.path(area, id)?;
        match std::fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ServiceError::NotFound(format!("{} '{id}'", area.trim_end_matches('s'))))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn put_dataset(&self, dataset: &StoredDataset) -> Result<String> {
        self.put(DATASETS, &serde_json::to_vec(dataset).map_err(whatif_core::Error::from)?)
    }

    pub fn dataset(&self, id: &str) -> Result<StoredDataset> {
        let bytes = self.get(DATASETS, id)?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Internal(format!("corrupt dataset {id}: {e}")))
    }

    /// Validates and stores a checkpoint file.
    pub fn put_checkpoint(&self, bytes: &[u8]) -> Result<String> {
        Checkpoint::from_bytes(bytes)?;
        self.put(CHECKPOINTS, bytes)
    }

    pub fn checkpoint(&self, id: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::from_bytes(&self.get(CHECKPOINTS, id)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_content_shares_an_id() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let table = SampleTable::read_csv("a,b\n1,0.5\n0,2.5\n".as_bytes()).unwrap();
        let a = store.put_dataset(&StoredDataset::from_table(&table)).unwrap();
        let b = store.put_dataset(&StoredDataset::from_table(&table)).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.dataset(&a).unwrap().table().unwrap(), table);
    }

    #[test]
    fn unknown_and_malformed_ids_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for id in ["0".repeat(64), "../etc".to_string()] {
            assert!(matches!(store.dataset(&id), Err(ServiceError::NotFound(_))));
        }
    }
}
