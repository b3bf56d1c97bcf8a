//! Encrypted embedded store holding policies, secrets, volume keys, tag
//! records, the database version and an audit log.
//!
//! # Files
//!
//! `state` (rewritten atomically on every commit):
//!
//! ```text
//! "WDB1" | key_check[32] | nonce(12) ‖ AEAD(json StateFile)
//!   key_check = SHA-256("db-key-check:" ‖ key)
//!   aad       = "WDB1" ‖ key_check
//! ```
//!
//! `audit` (append-only), one record per mutation:
//!
//! ```text
//! len u32 BE | nonce(12) ‖ AEAD(json AuditEntry), aad = "audit:" ‖ seq u64 BE
//! ```
//!
//! The state file carries the number of audit records and a hash chain over
//! them, so truncating, reordering or replacing the log is detected at open.
//! Records beyond the committed count (a crash between the two writes) are
//! discarded.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::crypto::{self, hash, hash_parts, Digest, KeyMaterial, SharedEntropy, SymmetricKey};
use crate::fs_shield::VolumeTag;
use crate::policy::PolicyDocument;
use crate::tags::{TagEvent, TagRecord};
use crate::util::write_atomic;

const STATE_MAGIC: &[u8; 4] = b"WDB1";
const STATE_FILE: &str = "state";
const AUDIT_FILE: &str = "audit";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store integrity violation: {0}")]
    Integrity(String),
    #[error("wrong database key")]
    WrongKey,
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredPolicy {
    pub doc: PolicyDocument,
    /// Fingerprint of the creating client's key.
    pub owner: Digest,
    pub revision: u64,
}

/// Everything the service persists, minus the audit log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    /// Database version `v` of the rollback guard.
    pub version: u64,
    pub policies: BTreeMap<String, StoredPolicy>,
    pub secrets: BTreeMap<String, BTreeMap<String, String>>,
    pub volume_keys: BTreeMap<String, BTreeMap<String, KeyMaterial>>,
    pub tags: BTreeMap<String, BTreeMap<String, TagRecord>>,
    pub tag_sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Mutation {
    PutPolicy {
        doc: PolicyDocument,
        owner: Digest,
    },
    DeletePolicy {
        name: String,
    },
    /// Replaces the policy's materialized secrets.
    PutSecrets {
        policy: String,
        values: BTreeMap<String, String>,
    },
    /// Replaces the policy's volume keys.
    PutVolumeKeys {
        policy: String,
        keys: BTreeMap<String, KeyMaterial>,
    },
    PushTag {
        policy: String,
        volume: String,
        service: String,
        tag: VolumeTag,
        event: TagEvent,
    },
    /// A board-approved policy change set the volume's tag.
    ResetTag {
        policy: String,
        volume: String,
        tag: VolumeTag,
    },
    SetVersion {
        version: u64,
    },
    /// Operator override after an unclean shutdown.
    Override {
        version: u64,
        reason: String,
    },
    Note {
        text: String,
    },
}

impl StoreState {
    pub fn apply(&mut self, m: &Mutation) {
        match m {
            Mutation::PutPolicy { doc, owner } => {
                let revision = self.policies.get(&doc.name).map_or(1, |p| p.revision + 1);
                self.policies.insert(
                    doc.name.clone(),
                    StoredPolicy {
                        doc: doc.clone(),
                        owner: *owner,
                        revision,
                    },
                );
            }
            Mutation::DeletePolicy { name } => {
                self.policies.remove(name);
                self.secrets.remove(name);
                self.volume_keys.remove(name);
                self.tags.remove(name);
            }
            Mutation::PutSecrets { policy, values } => {
                self.secrets.insert(policy.clone(), values.clone());
            }
            Mutation::PutVolumeKeys { policy, keys } => {
                self.volume_keys.insert(policy.clone(), keys.clone());
            }
            Mutation::PushTag {
                policy,
                volume,
                service,
                tag,
                event,
            } => {
                self.tag_sequence += 1;
                self.tags.entry(policy.clone()).or_default().insert(
                    volume.clone(),
                    TagRecord {
                        policy: policy.clone(),
                        volume: volume.clone(),
                        service: service.clone(),
                        expected: *tag,
                        last_event: *event,
                        sequence: self.tag_sequence,
                    },
                );
            }
            Mutation::ResetTag { policy, volume, tag } => {
                self.tag_sequence += 1;
                self.tags.entry(policy.clone()).or_default().insert(
                    volume.clone(),
                    TagRecord {
                        policy: policy.clone(),
                        volume: volume.clone(),
                        service: String::new(),
                        expected: *tag,
                        last_event: TagEvent::Exit,
                        sequence: self.tag_sequence,
                    },
                );
            }
            Mutation::SetVersion { version } | Mutation::Override { version, .. } => {
                self.version = *version;
            }
            Mutation::Note { .. } => {}
        }
    }

    pub fn tag_record(&self, policy: &str, volume: &str) -> Option<&TagRecord> {
        self.tags.get(policy)?.get(volume)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at_unix_ms: u64,
    /// Fingerprint of the client that caused the change, if any.
    pub actor: Option<Digest>,
    pub mutation: Mutation,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    state: StoreState,
    audit_count: u64,
    audit_head: Digest,
}

fn chain(prev: &Digest, entry_json: &[u8]) -> Digest {
    hash_parts(&[b"audit-chain:", prev.as_bytes(), entry_json])
}

fn key_check(key: &SymmetricKey) -> Digest {
    hash_parts(&[b"db-key-check:", key.as_bytes()])
}

fn audit_aad(seq: u64) -> Vec<u8> {
    let mut aad = b"audit:".to_vec();
    aad.extend_from_slice(&seq.to_be_bytes());
    aad
}

/// Replays `entries` on an empty state.
pub fn replay<'a>(entries: impl IntoIterator<Item = &'a AuditEntry>) -> StoreState {
    let mut s = StoreState::default();
    for e in entries {
        s.apply(&e.mutation);
    }
    s
}

pub struct EncryptedStore {
    dir: Option<PathBuf>,
    key: SymmetricKey,
    entropy: SharedEntropy,
    state: StoreState,
    audit: Vec<AuditEntry>,
    audit_head: Digest,
}

impl std::fmt::Debug for EncryptedStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncryptedStore")
            .field("dir", &self.dir)
            .field("version", &self.state.version)
            .finish_non_exhaustive()
    }
}

impl EncryptedStore {
    pub fn in_memory(key: SymmetricKey, entropy: SharedEntropy) -> Self {
        Self {
            dir: None,
            key,
            entropy,
            state: StoreState::default(),
            audit: Vec::new(),
            audit_head: hash(b"audit-genesis"),
        }
    }

    /// Opens the store in `dir`; a directory without a state file is a
    /// fresh store with version 0.
    pub fn open(dir: impl AsRef<Path>, key: SymmetricKey, entropy: SharedEntropy) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut store = Self::in_memory(key, entropy);
        store.dir = Some(dir.clone());
        let raw = match fs::read(dir.join(STATE_FILE)) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(store),
            Err(e) => return Err(e.into()),
        };
        let header_len = 4 + 32;
        if raw.len() < header_len || &raw[..4] != STATE_MAGIC {
            return Err(StoreError::Integrity("bad state header".into()));
        }
        if raw[4..header_len] != key_check(&store.key).0 {
            return Err(StoreError::WrongKey);
        }
        let body = crypto::seal_decrypt(&store.key, &raw[header_len..], &raw[..header_len])
            .map_err(|_| StoreError::Integrity("state authentication failed".into()))?;
        let file: StateFile =
            serde_json::from_slice(&body).map_err(|e| StoreError::Integrity(format!("state decode: {e}")))?;
        let (audit, head) = store.read_audit(&dir, file.audit_count)?;
        if head != file.audit_head {
            return Err(StoreError::Integrity("audit log does not match state".into()));
        }
        store.state = file.state;
        store.audit = audit;
        store.audit_head = head;
        Ok(store)
    }

    fn read_audit(&self, dir: &Path, count: u64) -> Result<(Vec<AuditEntry>, Digest), StoreError> {
        let mut head = hash(b"audit-genesis");
        let mut out = Vec::new();
        let raw = match fs::read(dir.join(AUDIT_FILE)) {
            Ok(r) => r,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut cur = raw.as_slice();
        let mut consumed = 0usize;
        while (out.len() as u64) < count {
            if cur.len() < 4 {
                return Err(StoreError::Integrity("audit log truncated".into()));
            }
            let len = u32::from_be_bytes(cur[..4].try_into().expect("4")) as usize;
            if cur.len() < 4 + len {
                return Err(StoreError::Integrity("audit log truncated".into()));
            }
            let seq = out.len() as u64 + 1;
            let json = crypto::seal_decrypt(&self.key, &cur[4..4 + len], &audit_aad(seq))
                .map_err(|_| StoreError::Integrity(format!("audit record {seq} authentication failed")))?;
            head = chain(&head, &json);
            let entry: AuditEntry =
                serde_json::from_slice(&json).map_err(|e| StoreError::Integrity(format!("audit decode: {e}")))?;
            out.push(entry);
            cur = &cur[4 + len..];
            consumed += 4 + len;
        }
        if consumed < raw.len() {
            let f = OpenOptions::new().write(true).open(dir.join(AUDIT_FILE))?;
            f.set_len(consumed as u64)?;
            f.sync_all()?;
        }
        Ok((out, head))
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn version(&self) -> u64 {
        self.state.version
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Applies `mutations` atomically. On error the in-memory state is
    /// unchanged.
    pub fn commit(&mut self, actor: Option<Digest>, mutations: Vec<Mutation>) -> Result<(), StoreError> {
        if mutations.is_empty() {
            return Ok(());
        }
        let mut next = self.state.clone();
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let mut head = self.audit_head;
        let mut entries = Vec::with_capacity(mutations.len());
        let mut encoded = Vec::new();
        for m in mutations {
            next.apply(&m);
            let entry = AuditEntry {
                seq: self.audit.len() as u64 + entries.len() as u64 + 1,
                at_unix_ms: now,
                actor,
                mutation: m,
            };
            let json = serde_json::to_vec(&entry).expect("audit entry serializes");
            head = chain(&head, &json);
            let sealed = crypto::seal_encrypt(&self.key, self.entropy.as_ref(), &json, &audit_aad(entry.seq));
            encoded.extend_from_slice(&(sealed.len() as u32).to_be_bytes());
            encoded.extend_from_slice(&sealed);
            entries.push(entry);
        }
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(AUDIT_FILE))?;
            f.write_all(&encoded)?;
            f.sync_all()?;
            let file = StateFile {
                state: next,
                audit_count: (self.audit.len() + entries.len()) as u64,
                audit_head: head,
            };
            let body = serde_json::to_vec(&file).expect("state serializes");
            let mut out = Vec::with_capacity(36 + body.len() + 28);
            out.extend_from_slice(STATE_MAGIC);
            out.extend_from_slice(key_check(&self.key).as_bytes());
            let sealed = crypto::seal_encrypt(&self.key, self.entropy.as_ref(), &body, &out);
            out.extend_from_slice(&sealed);
            write_atomic(&dir.join(STATE_FILE), &out)?;
            next = file.state;
        }
        self.state = next;
        self.audit.extend(entries);
        self.audit_head = head;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyPurpose, SeededEntropy};
    use crate::policy::parse_policy;
    use std::sync::Arc;

    fn key(seed: u64) -> SymmetricKey {
        SymmetricKey::generate(&SeededEntropy::new(seed), KeyPurpose::DbEncryption)
    }

    fn entropy() -> SharedEntropy {
        Arc::new(SeededEntropy::new(99))
    }

    fn sample_mutations(marker: &str) -> Vec<Mutation> {
        vec![
            Mutation::PutPolicy {
                doc: parse_policy("name: p\n").unwrap(),
                owner: hash(b"owner"),
            },
            Mutation::PutSecrets {
                policy: "p".into(),
                values: [("pw".to_string(), marker.to_string())].into(),
            },
            Mutation::PushTag {
                policy: "p".into(),
                volume: "v".into(),
                service: "s".into(),
                tag: VolumeTag::empty(),
                event: TagEvent::Close,
            },
            Mutation::SetVersion { version: 3 },
        ]
    }

    #[test]
    fn fresh_store_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let s = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
        assert_eq!(s.version(), 0);
        assert_eq!(s.state(), &StoreState::default());
    }

    #[test]
    fn reopen_restores_state_and_hides_secrets() {
        let dir = tempfile::tempdir().unwrap();
        let marker = "MARKER-0123456789abcdef";
        {
            let mut s = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
            s.commit(None, sample_mutations(marker)).unwrap();
        }
        let s = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
        assert_eq!(s.version(), 3);
        assert_eq!(s.state().secrets["p"]["pw"], marker);
        for f in [STATE_FILE, AUDIT_FILE] {
            let raw = fs::read(dir.path().join(f)).unwrap();
            assert!(!raw.windows(marker.len()).any(|w| w == marker.as_bytes()));
        }
    }

    #[test]
    fn byte_flip_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        EncryptedStore::open(dir.path(), key(1), entropy())
            .unwrap()
            .commit(None, sample_mutations("x"))
            .unwrap();
        for (file, offset) in [(STATE_FILE, 60usize), (AUDIT_FILE, 30)] {
            let path = dir.path().join(file);
            let orig = fs::read(&path).unwrap();
            let mut bad = orig.clone();
            bad[offset] ^= 1;
            fs::write(&path, bad).unwrap();
            assert!(matches!(
                EncryptedStore::open(dir.path(), key(1), entropy()),
                Err(StoreError::Integrity(_))
            ));
            fs::write(&path, orig).unwrap();
        }
        assert!(EncryptedStore::open(dir.path(), key(1), entropy()).is_ok());
    }

    #[test]
    fn wrong_key_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        EncryptedStore::open(dir.path(), key(1), entropy())
            .unwrap()
            .commit(None, sample_mutations("x"))
            .unwrap();
        assert!(matches!(
            EncryptedStore::open(dir.path(), key(2), entropy()),
            Err(StoreError::WrongKey)
        ));
    }

    #[test]
    fn audit_replay_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
        s.commit(None, sample_mutations("a")).unwrap();
        s.commit(None, vec![Mutation::DeletePolicy { name: "p".into() }]).unwrap();
        s.commit(None, sample_mutations("b")).unwrap();
        assert_eq!(&replay(s.audit()), s.state());
        let reopened = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
        assert_eq!(&replay(reopened.audit()), reopened.state());
    }

    #[test]
    fn uncommitted_audit_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
        s.commit(None, sample_mutations("a")).unwrap();
        let state_before = fs::read(dir.path().join(STATE_FILE)).unwrap();
        s.commit(None, vec![Mutation::SetVersion { version: 9 }]).unwrap();
        fs::write(dir.path().join(STATE_FILE), state_before).unwrap();
        let reopened = EncryptedStore::open(dir.path(), key(1), entropy()).unwrap();
        assert_eq!(reopened.version(), 3);
        assert_eq!(reopened.audit().len(), 4);
    }

    #[test]
    fn truncated_audit_log_refused() {
        let dir = tempfile::tempdir().unwrap();
        EncryptedStore::open(dir.path(), key(1), entropy())
            .unwrap()
            .commit(None, sample_mutations("a"))
            .unwrap();
        let path = dir.path().join(AUDIT_FILE);
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() - 10]).unwrap();
        assert!(matches!(
            EncryptedStore::open(dir.path(), key(1), entropy()),
            Err(StoreError::Integrity(_))
        ));
    }

    #[test]
    fn tag_sequence_strictly_increases() {
        let mut s = EncryptedStore::in_memory(key(1), entropy());
        let mut last = 0;
        for i in 0..10u8 {
            s.commit(
                None,
                vec![Mutation::PushTag {
                    policy: "p".into(),
                    volume: "v".into(),
                    service: "s".into(),
                    tag: VolumeTag(hash(&[i])),
                    event: TagEvent::Sync,
                }],
            )
            .unwrap();
            let r = s.state().tag_record("p", "v").unwrap();
            assert!(r.sequence > last);
            assert_eq!(r.expected, VolumeTag(hash(&[i])));
            last = r.sequence;
        }
    }
}
