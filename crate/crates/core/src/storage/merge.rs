//! Named merge functions for the `Merge` write policy.
//!
//! Functions are registered by name so consistency documents stay plain data.

use std::collections::BTreeMap;
use std::fmt;

/// Combines the stored value with an incoming one.
pub type MergeFn = fn(&[u8], &[u8]) -> Vec<u8>;

pub const LAST_WRITE_WINS: &str = "last-write-wins";
pub const SET_UNION: &str = "set-union";
pub const NUMERIC_MAX: &str = "numeric-max";

#[derive(Clone)]
pub struct MergeRegistry {
    fns: BTreeMap<String, MergeFn>,
}

impl fmt::Debug for MergeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.fns.keys()).finish()
    }
}

impl Default for MergeRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl MergeRegistry {
    pub fn empty() -> Self {
        Self {
            fns: BTreeMap::new(),
        }
    }

    /// Registry preloaded with `last-write-wins`, `set-union` and `numeric-max`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(LAST_WRITE_WINS, merge_last_write_wins);
        r.register(SET_UNION, merge_set_union);
        r.register(NUMERIC_MAX, merge_numeric_max);
        r
    }

    pub fn register(&mut self, name: &str, f: MergeFn) {
        self.fns.insert(name.to_string(), f);
    }

    pub fn get(&self, name: &str) -> Option<MergeFn> {
        self.fns.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fns.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }
}

fn merge_last_write_wins(_stored: &[u8], incoming: &[u8]) -> Vec<u8> {
    incoming.to_vec()
}

/// Values are compared under the order-preserving key encoding, so for an
/// encoded integer this is the numeric maximum.
fn merge_numeric_max(stored: &[u8], incoming: &[u8]) -> Vec<u8> {
    stored.max(incoming).to_vec()
}

fn merge_set_union(stored: &[u8], incoming: &[u8]) -> Vec<u8> {
    let mut set = decode_set(stored);
    set.extend(decode_set(incoming));
    encode_set(set.iter().map(Vec::as_slice))
}

/// Encodes a set value as sorted, deduplicated, length-prefixed elements.
pub fn encode_set<'a, I>(elems: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut sorted: Vec<&[u8]> = elems.into_iter().collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    for e in sorted {
        out.extend_from_slice(&(e.len() as u32).to_be_bytes());
        out.extend_from_slice(e);
    }
    out
}

/// Inverse of [`encode_set`]. Truncated trailing bytes are ignored.
pub fn decode_set(bytes: &[u8]) -> std::collections::BTreeSet<Vec<u8>> {
    let mut out = std::collections::BTreeSet::new();
    let mut rest = bytes;
    while rest.len() >= 4 {
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            break;
        }
        out.insert(rest[..len].to_vec());
        rest = &rest[len..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[u8]) -> Vec<u8> {
        let elems: Vec<[u8; 1]> = xs.iter().map(|x| [*x]).collect();
        encode_set(elems.iter().map(|e| e.as_slice()))
    }

    #[test]
    fn set_union_merges() {
        let r = MergeRegistry::with_builtins();
        let f = r.get(SET_UNION).unwrap();
        assert_eq!(f(&set(&[1, 2]), &set(&[2, 3])), set(&[1, 2, 3]));
    }

    #[test]
    fn numeric_max_on_encoded_ints() {
        let r = MergeRegistry::with_builtins();
        let f = r.get(NUMERIC_MAX).unwrap();
        let a = crate::storage::key::encode_i64(-5).to_vec();
        let b = crate::storage::key::encode_i64(3).to_vec();
        assert_eq!(f(&a, &b), b);
        assert_eq!(f(&b, &a), b);
    }

    #[test]
    fn unknown_name_missing() {
        assert!(!MergeRegistry::with_builtins().contains("concat"));
    }
}
