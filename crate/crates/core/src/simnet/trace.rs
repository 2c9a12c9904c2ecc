use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Send,
    /// Delivery to a crashed actor.
    Drop,
    /// A Byzantine sender withheld the message.
    Suppressed,
    Fault,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Tick,
    pub kind: RecordKind,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub from: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub to: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub deliver_at: Option<Tick>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
    /// What an honest sender would have sent, when a Byzantine sender differed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub honest: Option<String>,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

/// Append-only run log. Every record is folded into the digest; only kept
/// records are retained in memory.
#[derive(Debug, Clone)]
pub struct TraceLog {
    records: Vec<(u64, TraceRecord)>,
    hasher: Sha256,
    total: u64,
}

impl Default for TraceLog {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            hasher: Sha256::new(),
            total: 0,
        }
    }
}

impl TraceLog {
    pub fn push(&mut self, record: TraceRecord, keep: bool) {
        let line = record.to_line();
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.total += 1;
        if keep {
            self.records.push((self.total, record));
        }
    }

    /// Retained records with their 1-based position in the full event stream.
    pub fn records(&self) -> impl Iterator<Item = (u64, &TraceRecord)> {
        self.records.iter().map(|(i, r)| (*i, r))
    }

    pub fn get(&self, position: u64) -> Option<&TraceRecord> {
        self.records
            .binary_search_by_key(&position, |(i, _)| *i)
            .ok()
            .map(|idx| &self.records[idx].1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Hex SHA-256 over every record ever pushed, kept or not.
    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for (pos, r) in &self.records {
            let mut v = serde_json::to_value(r).expect("trace record serializes");
            v["pos"] = serde_json::json!(pos);
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}
