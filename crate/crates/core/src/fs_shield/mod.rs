//! Transparent volume encryption with a Merkle-root freshness tag.
//!
//! # On-disk layout
//!
//! Every file of the plaintext tree is stored at the same relative path
//! under the volume root as `nonce(12) ‖ ChaCha20-Poly1305(plaintext)` with
//! the relative path as associated data. The nonce is the first 12 bytes of
//! `SHA-256("fspf-nonce:" ‖ key ‖ path ‖ epoch_be64 ‖ content_digest)`.
//!
//! The file index lives in `<root>/.fspf`:
//!
//! ```text
//! magic "FSPF" | version u8 = 1 | epoch u64 BE | nonce(12) ‖ AEAD(index)
//!   aad   = magic ‖ version ‖ epoch
//!   index = count u32 BE, then per entry in path order:
//!           path_len u16 BE ‖ path (UTF-8) ‖ digest[32] ‖ file_epoch u64 BE ‖ len u64 BE
//! ```
//!
//! File contents are written through on every write; the manifest is
//! persisted (and fsynced) on [`ShieldedVolume::sync`]. The in-memory index
//! is authoritative while a volume is open, so replaying an older
//! ciphertext under the volume is detected on the next read.

mod inject;
mod merkle;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::crypto::{
    self, hash, hash_parts, Digest, KeyPurpose, SymmetricKey, AEAD_NONCE_LEN,
};
use crate::util::write_atomic;

pub use inject::{inject_secrets, inject_str, referenced_variables, InjectionError};
pub use merkle::{leaf_hash, merkle_root, VolumeTag, EMPTY_VOLUME_SENTINEL};

pub const MANIFEST_NAME: &str = ".fspf";
const MANIFEST_MAGIC: &[u8; 4] = b"FSPF";
const MANIFEST_VERSION: u8 = 1;
const MANIFEST_HEADER_LEN: usize = 4 + 1 + 8;

#[derive(Debug, thiserror::Error)]
pub enum ShieldError {
    #[error("file not found in volume: {0}")]
    NotFound(String),
    #[error("freshness violation on {path}: content does not match the file index (rollback suspected)")]
    Freshness { path: String },
    #[error("volume tag {actual} is not an expected tag (rollback suspected)")]
    TagMismatch { actual: VolumeTag, expected: Vec<VolumeTag> },
    #[error("integrity error on {path}: {reason}")]
    Integrity { path: String, reason: String },
    #[error("invalid volume path {0:?}")]
    InvalidPath(String),
    #[error("manifest corrupted: {0}")]
    Manifest(String),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &str) -> impl FnOnce(io::Error) -> ShieldError + '_ {
    move |source| ShieldError::Io {
        path: path.to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileEntry {
    pub digest: Digest,
    pub epoch: u64,
    pub len: u64,
}

/// Normalizes a volume-relative path: `/a//b` → `a/b`. Rejects `.`/`..`
/// components and the manifest name.
pub fn normalize_path(path: &str) -> Result<String, ShieldError> {
    let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty()).collect();
    if parts.is_empty()
        || parts.iter().any(|p| *p == "." || *p == ".." || p.contains('\0'))
        || parts[0] == MANIFEST_NAME
    {
        return Err(ShieldError::InvalidPath(path.to_string()));
    }
    Ok(parts.join("/"))
}

/// A directory whose files are encrypted under one key and whose contents
/// are summarized by a [`VolumeTag`].
#[derive(Debug)]
pub struct ShieldedVolume {
    root: PathBuf,
    key: SymmetricKey,
    index: BTreeMap<String, FileEntry>,
    epoch: u64,
    tag: VolumeTag,
    injected: BTreeMap<String, Vec<u8>>,
    dirty: bool,
}

impl ShieldedVolume {
    /// Initializes an empty volume at `root`, replacing any existing manifest.
    pub fn create(root: impl AsRef<Path>, key: SymmetricKey) -> Result<Self, ShieldError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(MANIFEST_NAME))?;
        let mut vol = Self {
            root,
            key,
            index: BTreeMap::new(),
            epoch: 0,
            tag: VolumeTag::empty(),
            injected: BTreeMap::new(),
            dirty: true,
        };
        vol.sync()?;
        Ok(vol)
    }

    pub fn open(root: impl AsRef<Path>, key: SymmetricKey) -> Result<Self, ShieldError> {
        let root = root.as_ref().to_path_buf();
        let raw = fs::read(root.join(MANIFEST_NAME)).map_err(io_err(MANIFEST_NAME))?;
        let (epoch, index) = decode_manifest(&key, &raw)?;
        let tag = merkle_root(index.iter().map(|(p, e)| (p.as_str(), &e.digest)));
        Ok(Self {
            root,
            key,
            index,
            epoch,
            tag,
            injected: BTreeMap::new(),
            dirty: false,
        })
    }

    pub fn open_or_create(root: impl AsRef<Path>, key: SymmetricKey) -> Result<Self, ShieldError> {
        if root.as_ref().join(MANIFEST_NAME).exists() {
            Self::open(root, key)
        } else {
            Self::create(root, key)
        }
    }

    /// Opens the volume, verifies every file and requires the resulting tag
    /// to be one of `expected`.
    pub fn open_verified(
        root: impl AsRef<Path>,
        key: SymmetricKey,
        expected: &[VolumeTag],
    ) -> Result<Self, ShieldError> {
        let vol = Self::open(root, key)?;
        vol.verify_against(expected)?;
        Ok(vol)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Tag derived from the in-memory file index.
    pub fn tag(&self) -> VolumeTag {
        self.tag
    }

    /// Reads and authenticates every file, then recomputes the tag.
    pub fn compute_tag(&self) -> Result<VolumeTag, ShieldError> {
        for path in self.index.keys() {
            self.read_from_disk(path)?;
        }
        Ok(merkle_root(self.index.iter().map(|(p, e)| (p.as_str(), &e.digest))))
    }

    pub fn verify_against(&self, expected: &[VolumeTag]) -> Result<VolumeTag, ShieldError> {
        let actual = self.compute_tag()?;
        if expected.contains(&actual) {
            Ok(actual)
        } else {
            Err(ShieldError::TagMismatch {
                actual,
                expected: expected.to_vec(),
            })
        }
    }

    pub fn files(&self) -> impl Iterator<Item = (&str, &FileEntry)> {
        self.index.iter().map(|(p, e)| (p.as_str(), e))
    }

    pub fn contains(&self, path: &str) -> bool {
        normalize_path(path).map(|p| self.index.contains_key(&p)).unwrap_or(false)
    }

    fn disk_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn file_nonce(&self, path: &str, epoch: u64, digest: &Digest) -> [u8; AEAD_NONCE_LEN] {
        let d = hash_parts(&[
            b"fspf-nonce:",
            self.key.as_bytes(),
            path.as_bytes(),
            &epoch.to_be_bytes(),
            digest.as_bytes(),
        ]);
        d.0[..AEAD_NONCE_LEN].try_into().expect("12 bytes")
    }

    pub fn write_file(&mut self, path: &str, plaintext: &[u8]) -> Result<VolumeTag, ShieldError> {
        let path = normalize_path(path)?;
        let digest = hash(plaintext);
        let epoch = self.index.get(&path).map_or(1, |e| e.epoch + 1);
        let nonce = self.file_nonce(&path, epoch, &digest);
        let ct = crypto::seal_encrypt_with_nonce(&self.key, nonce, plaintext, path.as_bytes());
        let disk = self.disk_path(&path);
        if let Some(parent) = disk.parent() {
            fs::create_dir_all(parent).map_err(io_err(&path))?;
        }
        fs::write(&disk, ct).map_err(io_err(&path))?;
        self.injected.remove(&path);
        self.index.insert(
            path,
            FileEntry {
                digest,
                epoch,
                len: plaintext.len() as u64,
            },
        );
        self.dirty = true;
        self.refresh_tag();
        Ok(self.tag)
    }

    fn read_from_disk(&self, path: &str) -> Result<Vec<u8>, ShieldError> {
        let entry = self
            .index
            .get(path)
            .ok_or_else(|| ShieldError::NotFound(path.to_string()))?;
        let raw = fs::read(self.disk_path(path)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ShieldError::Integrity {
                path: path.to_string(),
                reason: "indexed file missing on disk".into(),
            },
            _ => ShieldError::Io {
                path: path.to_string(),
                source: e,
            },
        })?;
        let pt = crypto::seal_decrypt(&self.key, &raw, path.as_bytes()).map_err(|e| {
            ShieldError::Integrity {
                path: path.to_string(),
                reason: e.to_string(),
            }
        })?;
        if hash(&pt) != entry.digest {
            return Err(ShieldError::Freshness {
                path: path.to_string(),
            });
        }
        Ok(pt)
    }

    /// Returns the plaintext of `path`. Files with injected secrets are
    /// served from memory.
    pub fn read_file(&self, path: &str) -> Result<Vec<u8>, ShieldError> {
        let path = normalize_path(path)?;
        if let Some(resolved) = self.injected.get(&path) {
            return Ok(resolved.clone());
        }
        self.read_from_disk(&path)
    }

    pub fn remove_file(&mut self, path: &str) -> Result<VolumeTag, ShieldError> {
        let path = normalize_path(path)?;
        if self.index.remove(&path).is_none() {
            return Err(ShieldError::NotFound(path));
        }
        self.injected.remove(&path);
        match fs::remove_file(self.disk_path(&path)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&path)(e)),
        }
        self.dirty = true;
        self.refresh_tag();
        Ok(self.tag)
    }

    pub fn rename_file(&mut self, from: &str, to: &str) -> Result<VolumeTag, ShieldError> {
        let data = self.read_file(from)?;
        let to_norm = normalize_path(to)?;
        if self.index.contains_key(&to_norm) {
            return Err(ShieldError::InvalidPath(format!("{to} already exists")));
        }
        self.remove_file(from)?;
        self.write_file(&to_norm, &data)
    }

    /// Resolves `$$name$$` references in `path` and keeps the result in
    /// memory; subsequent reads of `path` return the resolved bytes.
    pub fn inject_file(
        &mut self,
        path: &str,
        secrets: &BTreeMap<String, String>,
    ) -> Result<Vec<u8>, ShieldError> {
        let path = normalize_path(path)?;
        let template = self.read_from_disk(&path)?;
        let resolved = inject_secrets(&template, secrets)?;
        self.injected.insert(path, resolved.clone());
        Ok(resolved)
    }

    pub fn injected_paths(&self) -> impl Iterator<Item = &str> {
        self.injected.keys().map(String::as_str)
    }

    /// Open-read-increment-write of an 8-byte big-endian counter file.
    pub fn file_counter_increment(&mut self, path: &str) -> Result<u64, ShieldError> {
        let current = if self.contains(path) {
            let raw = self.read_file(path)?;
            let arr: [u8; 8] = raw.as_slice().try_into().map_err(|_| ShieldError::Integrity {
                path: path.to_string(),
                reason: format!("counter file holds {} bytes, expected 8", raw.len()),
            })?;
            u64::from_be_bytes(arr)
        } else {
            0
        };
        let next = current + 1;
        self.write_file(path, &next.to_be_bytes())?;
        Ok(next)
    }

    /// Persists the manifest durably.
    pub fn sync(&mut self) -> Result<VolumeTag, ShieldError> {
        if self.dirty {
            self.epoch += 1;
            let raw = encode_manifest(&self.key, self.epoch, &self.index);
            write_atomic(&self.root.join(MANIFEST_NAME), &raw).map_err(io_err(MANIFEST_NAME))?;
            self.dirty = false;
        }
        Ok(self.tag)
    }

    /// Re-encrypts every file under `new_key`. The tag is unchanged because
    /// leaves cover plaintext digests.
    pub fn rotate_key(&mut self, new_key: SymmetricKey) -> Result<VolumeTag, ShieldError> {
        let contents: Vec<(String, Vec<u8>)> = self
            .index
            .keys()
            .map(|p| self.read_from_disk(p).map(|d| (p.clone(), d)))
            .collect::<Result<_, _>>()?;
        self.key = new_key;
        for (path, data) in contents {
            self.write_file(&path, &data)?;
        }
        self.sync()
    }

    fn refresh_tag(&mut self) {
        self.tag = merkle_root(self.index.iter().map(|(p, e)| (p.as_str(), &e.digest)));
    }
}

fn manifest_nonce(key: &SymmetricKey, epoch: u64, body: &[u8]) -> [u8; AEAD_NONCE_LEN] {
    let d = hash_parts(&[
        b"fspf-nonce:",
        key.as_bytes(),
        MANIFEST_NAME.as_bytes(),
        &epoch.to_be_bytes(),
        hash(body).as_bytes(),
    ]);
    d.0[..AEAD_NONCE_LEN].try_into().expect("12 bytes")
}

fn encode_manifest(key: &SymmetricKey, epoch: u64, index: &BTreeMap<String, FileEntry>) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(index.len() as u32).to_be_bytes());
    for (path, e) in index {
        body.extend_from_slice(&(path.len() as u16).to_be_bytes());
        body.extend_from_slice(path.as_bytes());
        body.extend_from_slice(e.digest.as_bytes());
        body.extend_from_slice(&e.epoch.to_be_bytes());
        body.extend_from_slice(&e.len.to_be_bytes());
    }
    let mut header = Vec::with_capacity(MANIFEST_HEADER_LEN);
    header.extend_from_slice(MANIFEST_MAGIC);
    header.push(MANIFEST_VERSION);
    header.extend_from_slice(&epoch.to_be_bytes());
    let sealed = crypto::seal_encrypt_with_nonce(key, manifest_nonce(key, epoch, &body), &body, &header);
    header.extend_from_slice(&sealed);
    header
}

fn decode_manifest(key: &SymmetricKey, raw: &[u8]) -> Result<(u64, BTreeMap<String, FileEntry>), ShieldError> {
    let bad = |r: &str| ShieldError::Manifest(r.to_string());
    if raw.len() < MANIFEST_HEADER_LEN || &raw[..4] != MANIFEST_MAGIC {
        return Err(bad("bad magic"));
    }
    if raw[4] != MANIFEST_VERSION {
        return Err(bad("unsupported version"));
    }
    let epoch = u64::from_be_bytes(raw[5..13].try_into().expect("8 bytes"));
    let body = crypto::seal_decrypt(key, &raw[MANIFEST_HEADER_LEN..], &raw[..MANIFEST_HEADER_LEN])
        .map_err(|e| ShieldError::Integrity {
            path: MANIFEST_NAME.to_string(),
            reason: e.to_string(),
        })?;
    let mut cur = body.as_slice();
    let mut take = |n: usize| -> Result<&[u8], ShieldError> {
        if cur.len() < n {
            return Err(bad("truncated index"));
        }
        let (h, t) = cur.split_at(n);
        cur = t;
        Ok(h)
    };
    let count = u32::from_be_bytes(take(4)?.try_into().expect("4"));
    let mut index = BTreeMap::new();
    for _ in 0..count {
        let plen = u16::from_be_bytes(take(2)?.try_into().expect("2")) as usize;
        let path = std::str::from_utf8(take(plen)?)
            .map_err(|_| bad("non-utf8 path"))?
            .to_string();
        let digest = Digest(take(32)?.try_into().expect("32"));
        let epoch = u64::from_be_bytes(take(8)?.try_into().expect("8"));
        let len = u64::from_be_bytes(take(8)?.try_into().expect("8"));
        index.insert(path, FileEntry { digest, epoch, len });
    }
    Ok((epoch, index))
}

/// Generates a fresh volume key.
pub fn generate_volume_key(entropy: &dyn crypto::EntropySource) -> SymmetricKey {
    SymmetricKey::generate(entropy, KeyPurpose::FsEncryption)
}
