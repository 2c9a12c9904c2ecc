//! Arithmetic on the m-bit identifier circle.
//!
//! Every node and every stored entry lives at a [`Key`] on a circle of size
//! `2^m`. Ordering is only meaningful relative to a reference point, so all
//! comparisons go through [`KeySpace::distance`].
//!
//! Responsibility ranges are half-open on the left: a node owns
//! `(predecessor, self]`. A range whose bounds coincide covers the whole
//! circle, which is what a single-node ring owns.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported identifier width.
pub const MAX_BITS: u32 = 63;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyspaceError {
    #[error("keyspace width must be in 1..={MAX_BITS} bits, got {0}")]
    BadWidth(u32),
    #[error("key {key} does not fit in {bits} bits")]
    KeyTooLarge { key: u64, bits: u32 },
    #[error("replication factor must be in 1..=2^m, got {0}")]
    BadReplication(usize),
    #[error("finger index must be in 1..={bits}, got {index}")]
    BadFinger { index: u32, bits: u32 },
}

/// A point on the identifier circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Key(pub u64);

impl Key {
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The interval `(lower, upper]` on the circle; `lower == upper` is the full circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyRange {
    pub lower: Key,
    pub upper: Key,
}

impl KeyRange {
    pub fn new(lower: Key, upper: Key) -> Self {
        Self { lower, upper }
    }

    pub fn is_full(&self) -> bool {
        self.lower == self.upper
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}]", self.lower, self.upper)
    }
}

/// The `r` keys at which copies of one entity's state live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerSet {
    pub basis: Key,
    pub members: Vec<Key>,
}

impl PeerSet {
    pub fn replication(&self) -> usize {
        self.members.len()
    }
}

/// An identifier circle of `2^bits` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeySpace {
    bits: u32,
}

impl KeySpace {
    pub fn new(bits: u32) -> Result<Self, KeyspaceError> {
        if bits == 0 || bits > MAX_BITS {
            return Err(KeyspaceError::BadWidth(bits));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Number of keys on the circle, `2^m`.
    pub fn size(&self) -> u64 {
        1u64 << self.bits
    }

    fn mask(&self) -> u64 {
        self.size() - 1
    }

    pub fn key(&self, value: u64) -> Result<Key, KeyspaceError> {
        if value > self.mask() {
            return Err(KeyspaceError::KeyTooLarge {
                key: value,
                bits: self.bits,
            });
        }
        Ok(Key(value))
    }

    /// Reduces an arbitrary integer onto the circle.
    pub fn wrap(&self, value: u64) -> Key {
        Key(value & self.mask())
    }

    pub fn add(&self, k: Key, offset: u64) -> Key {
        Key(k.0.wrapping_add(offset) & self.mask())
    }

    pub fn sub(&self, k: Key, offset: u64) -> Key {
        Key(k.0.wrapping_sub(offset) & self.mask())
    }

    /// Clockwise distance from `a` to `b`, i.e. `(b - a) mod 2^m`.
    pub fn distance(&self, a: Key, b: Key) -> u64 {
        b.0.wrapping_sub(a.0) & self.mask()
    }

    /// Number of keys covered by `range`; the full circle reports `2^m`.
    pub fn width(&self, range: &KeyRange) -> u64 {
        if range.is_full() {
            self.size()
        } else {
            self.distance(range.lower, range.upper)
        }
    }

    /// Membership in `(lower, upper]`, correct across the zero point.
    pub fn contains(&self, range: &KeyRange, k: Key) -> bool {
        if range.is_full() {
            return true;
        }
        k != range.lower && self.distance(range.lower, k) <= self.distance(range.lower, range.upper)
    }

    /// True iff `k` lies strictly between `a` and `b` going clockwise.
    pub fn between_open(&self, a: Key, b: Key, k: Key) -> bool {
        if a == b {
            return k != a;
        }
        k != a && k != b && self.distance(a, k) < self.distance(a, b)
    }

    /// Offset of replica `n` out of `r`: `floor(n * 2^m / r)`.
    pub fn replica_offset(&self, n: usize, r: usize) -> u64 {
        ((n as u128 * self.size() as u128) / r as u128) as u64
    }

    fn check_replication(&self, r: usize) -> Result<(), KeyspaceError> {
        if r == 0 || r as u128 > self.size() as u128 {
            return Err(KeyspaceError::BadReplication(r));
        }
        Ok(())
    }

    pub fn replica_keys(&self, k: Key, r: usize) -> Result<PeerSet, KeyspaceError> {
        self.check_replication(r)?;
        let members = (0..r)
            .map(|n| self.add(k, self.replica_offset(n, r)))
            .collect();
        Ok(PeerSet { basis: k, members })
    }

    /// Calculated key of replica `index` for `uid`.
    pub fn replica_key(&self, uid: Key, index: usize, r: usize) -> Key {
        self.add(uid, self.replica_offset(index, r))
    }

    /// Images of `range` under the shifts for replicas `1..r`.
    pub fn replica_ranges(&self, range: &KeyRange, r: usize) -> Vec<KeyRange> {
        (1..r.max(1))
            .map(|n| self.shift_range(range, self.replica_offset(n, r)))
            .collect()
    }

    pub fn shift_range(&self, range: &KeyRange, offset: u64) -> KeyRange {
        KeyRange::new(self.add(range.lower, offset), self.add(range.upper, offset))
    }

    /// Every distinct shift `offset(j) - offset(n)` that maps a calculated key of
    /// replica `n` onto the calculated key of replica `j`, for all `n != j`.
    ///
    /// When `r` divides `2^m` this is exactly the offsets of [`Self::replica_ranges`].
    pub fn peer_shifts(&self, r: usize) -> Vec<u64> {
        let mut shifts: Vec<u64> = (0..r)
            .flat_map(|n| (0..r).filter(move |&j| j != n).map(move |j| (n, j)))
            .map(|(n, j)| {
                self.replica_offset(j, r)
                    .wrapping_sub(self.replica_offset(n, r))
                    & self.mask()
            })
            .collect();
        shifts.sort_unstable();
        shifts.dedup();
        shifts
    }

    /// Replica index `n` such that `key == uid + offset(n)`, if any.
    pub fn replica_index_of(&self, uid: Key, key: Key, r: usize) -> Option<usize> {
        let d = self.distance(uid, key);
        (0..r).find(|&n| self.replica_offset(n, r) == d)
    }

    /// `(nodeKey + 2^(i-1)) mod 2^m` for `i` in `1..=m`.
    pub fn finger_target(&self, node: Key, i: u32) -> Result<Key, KeyspaceError> {
        if i == 0 || i > self.bits {
            return Err(KeyspaceError::BadFinger {
                index: i,
                bits: self.bits,
            });
        }
        Ok(self.add(node, 1u64 << (i - 1)))
    }

    /// Splits the responsibility change `(old_pred, node] -> (new_pred, node]`
    /// into the range gained (`Ok`) or lost (`Err`). `None` when unchanged.
    pub fn range_delta(
        &self,
        node: Key,
        old_pred: Key,
        new_pred: Key,
    ) -> Option<Result<KeyRange, KeyRange>> {
        let old_w = self.width(&KeyRange::new(old_pred, node));
        let new_w = self.width(&KeyRange::new(new_pred, node));
        match new_w.cmp(&old_w) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(Ok(KeyRange::new(new_pred, old_pred))),
            std::cmp::Ordering::Less => Some(Err(KeyRange::new(old_pred, new_pred))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks(bits: u32) -> KeySpace {
        KeySpace::new(bits).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(ks(4).distance(Key(3), Key(3)), 0);
        assert_eq!(ks(4).distance(Key(14), Key(2)), 4);
        assert_eq!(ks(8).distance(Key(200), Key(100)), 156);
    }

    #[test]
    fn contains_wraps() {
        let s = ks(4);
        let r = KeyRange::new(Key(14), Key(2));
        assert!(s.contains(&r, Key(0)));
        assert!(!s.contains(&r, Key(14)));
        assert!(s.contains(&r, Key(2)));
        assert!(s.contains(&r, Key(15)));
        assert!(!s.contains(&r, Key(3)));
    }

    #[test]
    fn full_circle_contains_everything() {
        let s = ks(4);
        let r = KeyRange::new(Key(5), Key(5));
        assert!((0..16).all(|k| s.contains(&r, Key(k))));
        assert_eq!(s.width(&r), 16);
    }

    #[test]
    fn replica_keys_examples() {
        let s = ks(4);
        assert_eq!(
            s.replica_keys(Key(1), 4).unwrap().members,
            vec![Key(1), Key(5), Key(9), Key(13)]
        );
        assert_eq!(s.replica_keys(Key(7), 1).unwrap().members, vec![Key(7)]);
        assert_eq!(
            s.replica_keys(Key(3), 3).unwrap().members,
            vec![Key(3), Key(8), Key(13)]
        );
        assert_eq!(
            s.replica_keys(Key(3), 0),
            Err(KeyspaceError::BadReplication(0))
        );
        assert_eq!(
            s.replica_keys(Key(3), 17),
            Err(KeyspaceError::BadReplication(17))
        );
    }

    #[test]
    fn replica_ranges_examples() {
        let s = ks(4);
        assert_eq!(
            s.replica_ranges(&KeyRange::new(Key(15), Key(1)), 4),
            vec![
                KeyRange::new(Key(3), Key(5)),
                KeyRange::new(Key(7), Key(9)),
                KeyRange::new(Key(11), Key(13)),
            ]
        );
        assert!(s
            .replica_ranges(&KeyRange::new(Key(15), Key(1)), 1)
            .is_empty());
        assert_eq!(
            s.replica_ranges(&KeyRange::new(Key(14), Key(2)), 2),
            vec![KeyRange::new(Key(6), Key(10))]
        );
    }

    #[test]
    fn finger_targets() {
        let s = ks(4);
        assert_eq!(s.finger_target(Key(0), 1).unwrap(), Key(1));
        assert_eq!(s.finger_target(Key(0), 4).unwrap(), Key(8));
        assert_eq!(s.finger_target(Key(13), 3).unwrap(), Key(1));
        assert!(s.finger_target(Key(0), 0).is_err());
        assert!(s.finger_target(Key(0), 5).is_err());
    }

    #[test]
    fn key_validation() {
        let s = ks(4);
        assert!(s.key(15).is_ok());
        assert!(s.key(16).is_err());
        assert!(KeySpace::new(0).is_err());
        assert!(KeySpace::new(64).is_err());
    }

    #[test]
    fn range_delta_grow_and_shrink() {
        let s = ks(4);
        // predecessor 9 fails, new predecessor 6: gains (6, 9]
        assert_eq!(
            s.range_delta(Key(12), Key(9), Key(6)),
            Some(Ok(KeyRange::new(Key(6), Key(9))))
        );
        // node 7 joins in front of 9 whose predecessor was 4: loses (4, 7]
        assert_eq!(
            s.range_delta(Key(9), Key(4), Key(7)),
            Some(Err(KeyRange::new(Key(4), Key(7))))
        );
        assert_eq!(s.range_delta(Key(9), Key(4), Key(4)), None);
        // single node (full circle) gains a predecessor
        assert_eq!(
            s.range_delta(Key(9), Key(9), Key(4)),
            Some(Err(KeyRange::new(Key(9), Key(4))))
        );
    }

    #[test]
    fn peer_shifts_for_dividing_r_match_replica_offsets() {
        let s = ks(8);
        let expected: Vec<u64> = (1..4).map(|n| s.replica_offset(n, 4)).collect();
        assert_eq!(s.peer_shifts(4), expected);
        assert_eq!(s.replica_index_of(Key(250), Key(58), 4), Some(1));
        assert_eq!(s.replica_index_of(Key(250), Key(59), 4), None);
    }
}
