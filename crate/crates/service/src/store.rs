//! Durable session, flag and blob storage on the local filesystem.
//!
//! Layout under the root: `sessions/<id>.json`, `flags/<id>.json`,
//! `blobs/<sha256>`, `catalog/learned.jsonl` and `audit.jsonl`. Records are
//! written to a temporary file and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chartlint_core::blob::{BlobRef, BlobStore, FsBlobStore};
use chartlint_core::correction::CorrectionSession;
use chartlint_core::detection::AnalysisReport;
use chartlint_core::ingestion::VisualizationArtifact;
use chartlint_core::taxonomy::LearnedIssue;
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub artifact: VisualizationArtifact,
    pub original_blob: BlobRef,
    pub normalized_blob: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<AnalysisReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<CorrectionSession>,
    /// Flag ids raised from this session.
    #[serde(default)]
    pub flags: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub flag_id: String,
    pub session_id: String,
    pub issue: LearnedIssue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog_version: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
    blobs: FsBlobStore,
}

/// Ids become file names, so only a conservative alphabet is accepted.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 80 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

fn io(path: &Path, e: impl std::fmt::Display) -> ApiError {
    ApiError::storage(format!("{}: {e}", path.display()))
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<FsStore, ApiError> {
        let root = root.into();
        for sub in ["sessions", "flags", "catalog"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
        let blobs = FsBlobStore::new(root.join("blobs"))?;
        Ok(FsStore { root, blobs })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blobs(&self) -> &FsBlobStore {
        &self.blobs
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn learned_journal_path(&self) -> PathBuf {
        self.root.join("catalog").join("learned.jsonl")
    }

    fn write_atomic<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), ApiError> {
        let dir = path.parent().expect("record paths have a parent");
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(dir, e))?;
        let body = serde_json::to_vec_pretty(value).map_err(|e| io(path, e))?;
        tmp.write_all(&body).map_err(|e| io(path, e))?;
        tmp.as_file().sync_data().map_err(|e| io(path, e))?;
        tmp.persist(path).map_err(|e| io(path, e.error))?;
        Ok(())
    }

    fn read<T: DeserializeOwned>(&self, path: &Path) -> Result<Option<T>, ApiError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io(path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(path, e)),
        }
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    fn flag_path(&self, id: &str) -> PathBuf {
        self.root.join("flags").join(format!("{id}.json"))
    }

    pub fn save_session(&self, record: &SessionRecord) -> Result<(), ApiError> {
        self.write_atomic(&self.session_path(&record.session_id), record)
    }

    /// Loads a session and restores the artifact's image bytes from blobs.
    pub fn load_session(&self, id: &str) -> Result<Option<SessionRecord>, ApiError> {
        if !valid_id(id) {
            return Ok(None);
        }
        let Some(mut record) = self.read::<SessionRecord>(&self.session_path(id))? else {
            return Ok(None);
        };
        let fetch = |blob: &BlobRef| -> Result<Vec<u8>, ApiError> {
            self.blobs
                .get(&blob.key)?
                .ok_or_else(|| ApiError::storage(format!("image blob {} missing", blob.key)))
        };
        record.artifact.original_bytes = fetch(&record.original_blob)?;
        record.artifact.normalized_bytes = fetch(&record.normalized_blob)?;
        Ok(Some(record))
    }

    pub fn save_flag(&self, flag: &FlagRecord) -> Result<(), ApiError> {
        self.write_atomic(&self.flag_path(&flag.flag_id), flag)
    }

    pub fn load_flag(&self, id: &str) -> Result<Option<FlagRecord>, ApiError> {
        if !valid_id(id) {
            return Ok(None);
        }
        self.read(&self.flag_path(id))
    }

    pub fn list_flags(&self) -> Result<Vec<FlagRecord>, ApiError> {
        let dir = self.root.join("flags");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| io(&dir, e))? {
            let path = entry.map_err(|e| io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                out.extend(self.read::<FlagRecord>(&path)?);
            }
        }
        out.sort_by(|a, b| a.flag_id.cmp(&b.flag_id));
        Ok(out)
    }
}
