//! Append-only audit log. Callers enqueue events; one writer thread drains
//! the queue into a JSON-lines file and stamps monotone timestamps.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Sender, SyncSender};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditStage {
    Ingest,
    Extract,
    Detect,
    Localize,
    Correct,
    Refine,
    Flag,
    Approve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub timestamp: DateTime<Utc>,
    pub session_id: String,
    pub stage: AuditStage,
    pub summary: String,
}

enum Msg {
    Event(String, AuditStage, String),
    Flush(SyncSender<()>),
}

pub struct AuditLog {
    path: PathBuf,
    tx: Sender<Msg>,
}

impl AuditLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<AuditLog, ApiError> {
        let path = path.into();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ApiError::storage(format!("{}: {e}", path.display())))?;
        let mut last = read_events(&path)?.last().map(|e| e.timestamp);
        let (tx, rx) = mpsc::channel::<Msg>();
        std::thread::Builder::new()
            .name("audit-writer".into())
            .spawn(move || {
                for msg in rx {
                    match msg {
                        Msg::Event(session_id, stage, summary) => {
                            let mut timestamp = Utc::now();
                            if let Some(prev) = last {
                                if timestamp <= prev {
                                    timestamp = prev + Duration::microseconds(1);
                                }
                            }
                            last = Some(timestamp);
                            let event = AuditEvent {
                                timestamp,
                                session_id,
                                stage,
                                summary,
                            };
                            let line =
                                serde_json::to_string(&event).expect("audit event serializes");
                            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                                tracing::error!("audit write failed: {e}");
                            }
                        }
                        Msg::Flush(done) => {
                            let _ = file.sync_data();
                            let _ = done.send(());
                        }
                    }
                }
            })
            .map_err(|e| ApiError::storage(e.to_string()))?;
        Ok(AuditLog { path, tx })
    }

    pub fn record(&self, session_id: &str, stage: AuditStage, summary: impl Into<String>) {
        let _ = self
            .tx
            .send(Msg::Event(session_id.to_string(), stage, summary.into()));
    }

    /// Blocks until every event enqueued so far is on disk.
    pub fn flush(&self) {
        let (done, wait) = mpsc::sync_channel(1);
        if self.tx.send(Msg::Flush(done)).is_ok() {
            let _ = wait.recv();
        }
    }

    pub fn events(&self) -> Result<Vec<AuditEvent>, ApiError> {
        self.flush();
        read_events(&self.path)
    }
}

// The writer thread exits once the sender drops.
impl Drop for AuditLog {
    fn drop(&mut self) {
        self.flush();
    }
}

pub fn read_events(path: &Path) -> Result<Vec<AuditEvent>, ApiError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ApiError::storage(e.to_string())),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| ApiError::storage(e.to_string()))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| ApiError::storage(e.to_string()))?);
        }
    }
    Ok(out)
}
