//! Append-only audit verdict log stored as line-delimited JSON.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Fraud,
    Normal,
    Uncertain,
}

impl Verdict {
    /// Definitive verdicts must carry a reason.
    pub fn requires_reason(self) -> bool {
        matches!(self, Verdict::Fraud | Verdict::Normal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditAnnotation {
    pub annotation_id: u64,
    pub group_id: String,
    pub patient_ids: Vec<String>,
    pub verdict: Verdict,
    pub reason: String,
    pub author: String,
    pub created_at: DateTime<Utc>,
    /// Detection the group id refers to.
    pub detection_version: u64,
}

#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    entries: Vec<AuditAnnotation>,
}

impl AnnotationLog {
    /// Opens the log at `path`, replaying existing entries. A missing file is
    /// an empty log.
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        let mut entries: Vec<AuditAnnotation> = Vec::new();
        match File::open(&path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: AuditAnnotation = serde_json::from_str(&line).map_err(|e| {
                        io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}:{}: {e}", path.display(), i + 1),
                        )
                    })?;
                    if entries.last().is_some_and(|p| p.annotation_id >= entry.annotation_id) {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}:{}: annotation ids must increase", path.display(), i + 1),
                        ));
                    }
                    entries.push(entry);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self { path, entries })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &[AuditAnnotation] {
        &self.entries
    }

    pub fn next_id(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.annotation_id + 1)
    }

    /// Assigns the next id, durably appends the entry, then records it.
    pub fn append(&mut self, mut entry: AuditAnnotation) -> io::Result<AuditAnnotation> {
        entry.annotation_id = self.next_id();
        let mut line = serde_json::to_string(&entry).map_err(io::Error::other)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.entries.push(entry.clone());
        Ok(entry)
    }
}
