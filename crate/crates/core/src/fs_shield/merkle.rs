//! Merkle root over a volume's file index.
//!
//! Leaves are `hash(path ‖ content_digest)` in lexicographic path order,
//! internal nodes are `hash(left ‖ right)`, and an unpaired node is promoted
//! to the next level unchanged. The empty volume hashes a fixed sentinel.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{hash, hash_parts, CryptoError, Digest};

pub const EMPTY_VOLUME_SENTINEL: &[u8] = b"fspf:empty-volume";

/// Merkle root over a volume; the freshness anchor of its contents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VolumeTag(pub Digest);

impl fmt::Debug for VolumeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VolumeTag({})", &self.0.to_string()[..16])
    }
}

impl fmt::Display for VolumeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::str::FromStr for VolumeTag {
    type Err = CryptoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(VolumeTag)
    }
}

impl VolumeTag {
    pub fn empty() -> Self {
        VolumeTag(hash(EMPTY_VOLUME_SENTINEL))
    }
}

pub fn leaf_hash(path: &str, content: &Digest) -> Digest {
    hash_parts(&[path.as_bytes(), content.as_bytes()])
}

/// Root over `(path, content_digest)` entries; order of the input is irrelevant.
pub fn merkle_root<'a, I>(entries: I) -> VolumeTag
where
    I: IntoIterator<Item = (&'a str, &'a Digest)>,
{
    let mut sorted: Vec<(&str, &Digest)> = entries.into_iter().collect();
    sorted.sort_unstable_by(|a, b| a.0.cmp(b.0));
    let mut level: Vec<Digest> = sorted.iter().map(|(p, d)| leaf_hash(p, d)).collect();
    if level.is_empty() {
        return VolumeTag::empty();
    }
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => hash_parts(&[l.as_bytes(), r.as_bytes()]),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
    }
    VolumeTag(level[0])
}
