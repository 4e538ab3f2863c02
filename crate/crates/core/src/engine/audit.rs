//! Append-only, hash-chained audit log stored as newline-delimited JSON.
//!
//! Entry 0 is a genesis record carrying the initial state digest. Every
//! entry stores the hash of its predecessor and its own hash over the
//! canonical JSON of its record.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DisgorgementRequest, Escalation};
use crate::digest::{digest_json, Digest};

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit log corrupt at entry {entry} (byte offset {offset}): {reason}")]
    Corrupt {
        entry: usize,
        offset: usize,
        reason: String,
    },
    #[error("audit log is empty (no genesis entry)")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AuditError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    /// `None` only for the genesis entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<DisgorgementRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Digest>,
    pub cost: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub escalations: Vec<Escalation>,
    pub state_digest: Digest,
    pub prev_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    #[serde(flatten)]
    pub record: AuditRecord,
    pub entry_hash: Digest,
}

impl AuditEntry {
    fn seal(record: AuditRecord) -> Self {
        AuditEntry {
            entry_hash: digest_json(&record),
            record,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("audit entry serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn genesis(state_digest: Digest) -> Self {
        AuditLog {
            entries: vec![AuditEntry::seal(AuditRecord {
                seq: 0,
                request: None,
                certificate: None,
                cost: 0,
                escalations: Vec::new(),
                state_digest,
                prev_hash: Digest::default(),
            })],
        }
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn head(&self) -> &AuditEntry {
        self.entries.last().expect("log always has a genesis entry")
    }

    /// Request entries only, in order.
    pub fn requests(&self) -> impl Iterator<Item = &DisgorgementRequest> {
        self.entries.iter().filter_map(|e| e.record.request.as_ref())
    }

    pub fn find_request(&self, request_id: &str) -> Option<&AuditEntry> {
        self.entries
            .iter()
            .find(|e| e.record.request.as_ref().is_some_and(|r| r.request_id == request_id))
    }

    pub fn append(
        &mut self,
        request: DisgorgementRequest,
        certificate: Digest,
        cost: u64,
        escalations: Vec<Escalation>,
        state_digest: Digest,
    ) -> &AuditEntry {
        let head = self.head();
        let entry = AuditEntry::seal(AuditRecord {
            seq: head.record.seq + 1,
            request: Some(request),
            certificate: Some(certificate),
            cost,
            escalations,
            state_digest,
            prev_hash: head.entry_hash,
        });
        self.entries.push(entry);
        self.head()
    }

    /// The first `len` entries (at least the genesis entry).
    pub fn truncated(&self, len: usize) -> AuditLog {
        AuditLog {
            entries: self.entries[..len.clamp(1, self.entries.len())].to_vec(),
        }
    }

    /// State digests in log order, genesis first.
    pub fn state_digests(&self) -> Vec<Digest> {
        self.entries.iter().map(|e| e.record.state_digest).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut offset = 0;
        for (i, e) in self.entries.iter().enumerate() {
            check_entry(self.entries[..i].last(), e, i, offset)?;
            offset += e.to_json_line().len() + 1;
        }
        if self.entries.is_empty() {
            return Err(AuditError::Empty);
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        self.entries.iter().map(|e| e.to_json_line() + "\n").collect()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut entries: Vec<AuditEntry> = Vec::new();
        let mut offset = 0;
        for line in bytes.split_inclusive(|&b| b == b'\n') {
            let body = line.strip_suffix(b"\n").unwrap_or(line);
            if !body.is_empty() {
                let i = entries.len();
                let entry: AuditEntry = serde_json::from_slice(body).map_err(|e| AuditError::Corrupt {
                    entry: i,
                    offset,
                    reason: format!("unparseable entry: {e}"),
                })?;
                check_entry(entries.last(), &entry, i, offset)?;
                entries.push(entry);
            }
            offset += line.len();
        }
        if entries.is_empty() {
            return Err(AuditError::Empty);
        }
        Ok(AuditLog { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| AuditError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ndjson()).map_err(|source| AuditError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Appends the entries of `self` beyond the first `persisted` to `path`.
    pub fn append_to(&self, path: &Path, persisted: usize) -> Result<()> {
        let io = |source| AuditError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        for e in &self.entries[persisted.min(self.entries.len())..] {
            writeln!(f, "{}", e.to_json_line()).map_err(io)?;
        }
        f.sync_all().map_err(io)
    }
}

fn check_entry(prev: Option<&AuditEntry>, e: &AuditEntry, i: usize, offset: usize) -> Result<()> {
    let corrupt = |reason: String| AuditError::Corrupt {
        entry: i,
        offset,
        reason,
    };
    if digest_json(&e.record) != e.entry_hash {
        return Err(corrupt("entry hash does not match its contents".into()));
    }
    if e.record.seq != i as u64 {
        return Err(corrupt(format!("sequence number {} out of order", e.record.seq)));
    }
    let expected_prev = prev.map(|p| p.entry_hash).unwrap_or_default();
    if e.record.prev_hash != expected_prev {
        return Err(corrupt("hash chain broken (prev_hash mismatch)".into()));
    }
    if (i == 0) != e.record.request.is_none() {
        return Err(corrupt("only the first entry may (and must) lack a request".into()));
    }
    Ok(())
}
