use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dht::consensus::ProposalId;
use crate::keyspace::{Key, KeyRange, KeySpace};
use crate::protocol::EntryCopy;

/// One replica's copy of a uid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreEntry {
    /// Where the entry lives on the circle: `uid + offset(index)`.
    pub calculated: Key,
    pub uid: Key,
    pub index: usize,
    pub value: Vec<u8>,
    pub version: u64,
    /// The put that wrote this version, when known.
    pub id: Option<ProposalId>,
}

impl StoreEntry {
    pub fn copy(&self) -> EntryCopy {
        EntryCopy {
            uid: self.uid,
            index: self.index,
            value: self.value.clone(),
            version: self.version,
            id: self.id,
        }
    }
}

/// Entries held by one node, keyed by `(uid, replica index)`.
#[derive(Debug, Clone, Default)]
pub struct Store {
    entries: BTreeMap<(Key, usize), StoreEntry>,
}

impl Store {
    pub fn get(&self, uid: Key, index: usize) -> Option<&StoreEntry> {
        self.entries.get(&(uid, index))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoreEntry> {
        self.entries.values()
    }

    /// Writes `entry` unless the store already has a later version.
    /// Returns true if the store changed.
    pub fn write(&mut self, entry: StoreEntry) -> bool {
        let key = (entry.uid, entry.index);
        match self.entries.get(&key) {
            Some(old) if old.version > entry.version => false,
            Some(old) if old == &entry => false,
            _ => {
                self.entries.insert(key, entry);
                true
            }
        }
    }

    /// Writes `entry` only if it is strictly newer than what the store has.
    /// Used for unendorsed copies such as transfers from a single node.
    pub fn offer(&mut self, entry: StoreEntry) -> bool {
        if self
            .get(entry.uid, entry.index)
            .is_some_and(|old| old.version >= entry.version)
        {
            return false;
        }
        self.entries.insert((entry.uid, entry.index), entry);
        true
    }

    pub fn remove(&mut self, uid: Key, index: usize) -> Option<StoreEntry> {
        self.entries.remove(&(uid, index))
    }

    /// Entries whose calculated key lies in `range`.
    pub fn in_range<'a>(
        &'a self,
        ks: &'a KeySpace,
        range: &'a KeyRange,
    ) -> impl Iterator<Item = &'a StoreEntry> + 'a {
        self.entries
            .values()
            .filter(move |e| ks.contains(range, e.calculated))
    }

    /// Hex SHA-256 over the full contents, for comparing final states.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in self.entries.values() {
            h.update(e.uid.0.to_le_bytes());
            h.update((e.index as u64).to_le_bytes());
            h.update(e.version.to_le_bytes());
            h.update((e.value.len() as u64).to_le_bytes());
            h.update(&e.value);
        }
        hex::encode(h.finalize())
    }
}

/// Short digest of a value, used to match replies from different replicas.
pub fn value_digest(value: &[u8]) -> [u8; 16] {
    let full = Sha256::digest(value);
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}
