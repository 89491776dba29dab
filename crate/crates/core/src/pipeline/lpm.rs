//! Longest-prefix match over 64-bit keys.
//!
//! A plain binary trie walked from the most significant bit. Lookups touch at
//! most 65 nodes. Nodes live in an arena; removal prunes empty leaves and
//! recycles their slots.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PrefixError {
    #[error("prefix length {0} exceeds 64")]
    LengthOutOfRange(u8),
    #[error("prefix value {value:#x} has bits set below /{len}")]
    HostBitsSet { value: u64, len: u8 },
}

/// A (value, length) pair over the 64-bit key space. The bits of `value`
/// below the prefix length are always zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPrefix", into = "RawPrefix")]
pub struct Prefix {
    value: u64,
    len: u8,
}

#[derive(Serialize, Deserialize)]
struct RawPrefix {
    value: u64,
    len: u8,
}

impl TryFrom<RawPrefix> for Prefix {
    type Error = PrefixError;
    fn try_from(raw: RawPrefix) -> Result<Self, Self::Error> {
        Prefix::new(raw.value, raw.len)
    }
}

impl From<Prefix> for RawPrefix {
    fn from(p: Prefix) -> Self {
        RawPrefix {
            value: p.value,
            len: p.len,
        }
    }
}

pub(crate) fn prefix_mask(len: u8) -> u64 {
    if len == 0 {
        0
    } else {
        u64::MAX << (64 - u32::from(len))
    }
}

impl Prefix {
    /// The /0 prefix that matches every key.
    pub const WILDCARD: Prefix = Prefix { value: 0, len: 0 };

    pub fn new(value: u64, len: u8) -> Result<Self, PrefixError> {
        if len > 64 {
            return Err(PrefixError::LengthOutOfRange(len));
        }
        if value & !prefix_mask(len) != 0 {
            return Err(PrefixError::HostBitsSet { value, len });
        }
        Ok(Prefix { value, len })
    }

    /// Prefix of length `len` containing `key` (host bits cleared).
    pub fn covering(key: u64, len: u8) -> Result<Self, PrefixError> {
        if len > 64 {
            return Err(PrefixError::LengthOutOfRange(len));
        }
        Ok(Prefix {
            value: key & prefix_mask(len),
            len,
        })
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_wildcard(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, key: u64) -> bool {
        key & prefix_mask(self.len) == self.value
    }

    /// Lowest key covered.
    pub fn first(&self) -> u64 {
        self.value
    }

    /// Number of keys covered, as u128 so that /0 fits.
    pub fn size(&self) -> u128 {
        1u128 << (64 - u32::from(self.len))
    }

    /// True if the two prefixes share at least one key.
    pub fn overlaps(&self, other: &Prefix) -> bool {
        let len = self.len.min(other.len);
        let mask = prefix_mask(len);
        self.value & mask == other.value & mask
    }

    fn bit(key: u64, depth: u8) -> usize {
        ((key >> (63 - u32::from(depth))) & 1) as usize
    }
}

impl fmt::Debug for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}/{}", self.value, self.len)
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.value, self.len)
    }
}

impl Ord for Prefix {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.value, self.len).cmp(&(other.value, other.len))
    }
}

impl PartialOrd for Prefix {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node<V> {
    children: [u32; 2],
    value: Option<V>,
}

impl<V> Node<V> {
    fn empty() -> Self {
        Node {
            children: [NIL, NIL],
            value: None,
        }
    }

    fn is_leaf(&self) -> bool {
        self.children == [NIL, NIL]
    }
}

/// Binary trie keyed by [`Prefix`].
#[derive(Debug, Clone)]
pub struct PrefixTrie<V> {
    nodes: Vec<Node<V>>,
    free: Vec<u32>,
    len: usize,
}

impl<V: Copy> Default for PrefixTrie<V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<V: Copy> PrefixTrie<V> {
    pub fn new() -> Self {
        PrefixTrie {
            nodes: vec![Node::empty()],
            free: Vec::new(),
            len: 0,
        }
    }

    /// Number of stored prefixes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn alloc(&mut self) -> u32 {
        match self.free.pop() {
            Some(idx) => {
                self.nodes[idx as usize] = Node::empty();
                idx
            }
            None => {
                self.nodes.push(Node::empty());
                (self.nodes.len() - 1) as u32
            }
        }
    }

    /// Inserts or replaces; returns the previous value for this exact prefix.
    pub fn insert(&mut self, prefix: Prefix, value: V) -> Option<V> {
        let mut idx = 0u32;
        for depth in 0..prefix.len {
            let b = Prefix::bit(prefix.value, depth);
            let next = self.nodes[idx as usize].children[b];
            idx = if next == NIL {
                let n = self.alloc();
                self.nodes[idx as usize].children[b] = n;
                n
            } else {
                next
            };
        }
        let old = self.nodes[idx as usize].value.replace(value);
        if old.is_none() {
            self.len += 1;
        }
        old
    }

    pub fn get(&self, prefix: &Prefix) -> Option<V> {
        let mut idx = 0u32;
        for depth in 0..prefix.len {
            idx = self.nodes[idx as usize].children[Prefix::bit(prefix.value, depth)];
            if idx == NIL {
                return None;
            }
        }
        self.nodes[idx as usize].value
    }

    pub fn remove(&mut self, prefix: &Prefix) -> Option<V> {
        let mut path = Vec::with_capacity(usize::from(prefix.len) + 1);
        let mut idx = 0u32;
        path.push(idx);
        for depth in 0..prefix.len {
            idx = self.nodes[idx as usize].children[Prefix::bit(prefix.value, depth)];
            if idx == NIL {
                return None;
            }
            path.push(idx);
        }
        let old = self.nodes[idx as usize].value.take()?;
        self.len -= 1;

        // Prune now-empty leaves back toward the root.
        for depth in (0..prefix.len).rev() {
            let child = path[usize::from(depth) + 1];
            let node = &self.nodes[child as usize];
            if !node.is_leaf() || node.value.is_some() {
                break;
            }
            let parent = path[usize::from(depth)];
            self.nodes[parent as usize].children[Prefix::bit(prefix.value, depth)] = NIL;
            self.free.push(child);
        }
        Some(old)
    }

    /// Longest stored prefix containing `key`, with its value.
    pub fn lookup(&self, key: u64) -> Option<(Prefix, V)> {
        let mut idx = 0u32;
        let mut best = self.nodes[0].value.map(|v| (0u8, v));
        for depth in 0..64u8 {
            idx = self.nodes[idx as usize].children[Prefix::bit(key, depth)];
            if idx == NIL {
                break;
            }
            if let Some(v) = self.nodes[idx as usize].value {
                best = Some((depth + 1, v));
            }
        }
        best.map(|(len, v)| {
            (
                Prefix {
                    value: key & prefix_mask(len),
                    len,
                },
                v,
            )
        })
    }

    /// All stored entries in (value, length) order.
    pub fn entries(&self) -> Vec<(Prefix, V)> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![(0u32, 0u64, 0u8)];
        while let Some((idx, value, len)) = stack.pop() {
            let node = &self.nodes[idx as usize];
            if let Some(v) = node.value {
                out.push((Prefix { value, len }, v));
            }
            for b in [1usize, 0] {
                let c = node.children[b];
                if c != NIL {
                    let v = value | ((b as u64) << (63 - u32::from(len)));
                    stack.push((c, v, len + 1));
                }
            }
        }
        out.sort_by_key(|a| a.0);
        out
    }
}

impl<V: Copy> FromIterator<(Prefix, V)> for PrefixTrie<V> {
    fn from_iter<I: IntoIterator<Item = (Prefix, V)>>(iter: I) -> Self {
        let mut trie = PrefixTrie::new();
        for (p, v) in iter {
            trie.insert(p, v);
        }
        trie
    }
}
