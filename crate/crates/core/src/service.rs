//! The trust service independent of any transport: governed policy
//! changes, session attestation and admission, tag tracking, and the
//! rollback-guarded instance lifecycle.
//!
//! All state lives in one [`EncryptedStore`]. Every request is refused
//! unless the instance holds a live [`RunningToken`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::approval::{ApprovalNonce, ApprovalRequest, ApprovalTransport, SignedVote};
use crate::attestation::{
    check_session_report, instance_self_attest, CheckFailure, InstanceCertificate, SessionConfig, SessionToken,
    VolumeGrant, VolumeKind,
};
use crate::crypto::{
    self, hash, hex_newtype_serde, Digest, EntropySource, KeyMaterial, KeyPurpose, PublicKey, SharedEntropy,
    SigningKeyPair,
};
use crate::fs_shield::{inject_str, VolumeTag};
use crate::policy::{
    evaluate_board, permitted_combinations, resolve_exports, BoardDecision, ImportKind, Outcome, PolicyBoard,
    PolicyDocument, PolicyError, SecretKind, Value, Vote,
};
use crate::rollback::{self, GuardError, RunningToken};
use crate::store::{EncryptedStore, Mutation, StoreError, StoreState};
use crate::tags::TagRecord;
use crate::tags::{admit_restart, check_restart_gate, AdmitRefusal, Admission, TagEvent};
use crate::tee::{measure, AttestationReport, Measurement, Platform, PlatformCounter, QuotingAuthority, TeeError};

/// Code bundle whose measurement identifies this service build.
pub const SERVICE_CODE: &[u8] = b"warden-trust-service/1";
/// Volume name under which a service's root file system is granted.
pub const ROOT_VOLUME: &str = "@root";
pub const IDENTITY_FILE: &str = "identity.sealed";
pub const DB_DIR: &str = "db";

pub fn service_measurement() -> Measurement {
    measure(SERVICE_CODE)
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("service is not running")]
    NotRunning,
    /// Also returned when the caller does not own the resource.
    #[error("not found")]
    NotFound,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("attestation refused: {0}")]
    Attestation(CheckFailure),
    #[error("no permitted (mrenclave, tag) combination for this session")]
    CombinationRejected,
    #[error("admission refused: {0}")]
    Admission(AdmitRefusal),
    #[error("unknown session")]
    UnknownSession,
    #[error("session superseded by a newer session or policy revision")]
    Superseded,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Tee(#[from] TeeError),
}

impl ServiceError {
    /// Stable machine-readable code carried in error responses.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotRunning => "not-running",
            ServiceError::NotFound => "not-found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::Attestation(f) => f.code(),
            ServiceError::CombinationRejected => "combination-rejected",
            ServiceError::Admission(AdmitRefusal::Freshness { .. }) => "freshness-violation",
            ServiceError::Admission(AdmitRefusal::RestartGate { .. }) => "restart-gate",
            ServiceError::UnknownSession => "unknown-session",
            ServiceError::Superseded => "superseded",
            ServiceError::Policy(PolicyError::ExportNotGranted { .. }) => "export-not-granted",
            ServiceError::Policy(_) => "invalid-policy",
            ServiceError::Store(_) => "store",
            ServiceError::Guard(_) => "guard",
            ServiceError::Tee(_) => "platform",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ServiceError::NotRunning => 503,
            ServiceError::NotFound => 404,
            ServiceError::Conflict(_) => 409,
            ServiceError::Invalid(_) | ServiceError::Policy(_) => 400,
            ServiceError::Attestation(_)
            | ServiceError::CombinationRejected
            | ServiceError::Admission(_)
            | ServiceError::UnknownSession
            | ServiceError::Superseded => 403,
            ServiceError::Store(_) | ServiceError::Guard(_) | ServiceError::Tee(_) => 500,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChangeId(pub [u8; 16]);

hex_newtype_serde!(ChangeId, 16);

impl fmt::Debug for ChangeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChangeId({self})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeAction {
    Create,
    Update,
    Delete,
    /// Release of secret values and volume keys to the owner.
    ReadSecrets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeStatus {
    Pending,
    Applied,
    Rejected,
    /// Approved but no longer applicable.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoardRole {
    Current,
    New,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardProgress {
    pub role: BoardRole,
    pub decision: BoardDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeView {
    pub id: ChangeId,
    pub action: ChangeAction,
    pub policy: String,
    pub digest: Digest,
    pub status: ChangeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boards: Vec<BoardProgress>,
}

/// Secret material of a policy, released only through an approved change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretsView {
    pub secrets: BTreeMap<String, String>,
    pub volume_keys: BTreeMap<String, KeyMaterial>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyView {
    /// Explicit values and keys redacted.
    pub policy: PolicyDocument,
    pub owner: Digest,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub running: bool,
    pub version: u64,
    pub counter: u64,
    pub mre: Measurement,
}

/// Hash of the canonical JSON of `{action, name, before, after}`.
pub fn change_digest(
    action: ChangeAction,
    name: &str,
    before: Option<&PolicyDocument>,
    after: Option<&PolicyDocument>,
) -> Digest {
    #[derive(Serialize)]
    struct Canonical<'a> {
        action: ChangeAction,
        name: &'a str,
        before: Option<&'a PolicyDocument>,
        after: Option<&'a PolicyDocument>,
    }
    let bytes = serde_json::to_vec(&Canonical {
        action,
        name,
        before,
        after,
    })
    .expect("serializable");
    hash(&bytes)
}

/// Boards that must approve a change, in evaluation order.
pub fn required_boards(
    action: ChangeAction,
    before: Option<&PolicyDocument>,
    after: Option<&PolicyDocument>,
) -> Vec<(BoardRole, PolicyBoard)> {
    let current = before.and_then(|d| d.board.clone());
    let new = after.and_then(|d| d.board.clone());
    match action {
        ChangeAction::Create => new.map(|b| (BoardRole::New, b)).into_iter().collect(),
        ChangeAction::Update => {
            let mut out: Vec<_> = current.clone().map(|b| (BoardRole::Current, b)).into_iter().collect();
            if new != current {
                out.extend(new.map(|b| (BoardRole::New, b)));
            }
            out
        }
        ChangeAction::Delete | ChangeAction::ReadSecrets => {
            current.map(|b| (BoardRole::Current, b)).into_iter().collect()
        }
    }
}

struct ChangeRecord {
    view: ChangeView,
    requester: Digest,
    after: Option<PolicyDocument>,
    /// Revision of the policy the change was computed against.
    base_revision: Option<u64>,
    released: Option<SecretsView>,
}

struct SessionEntry {
    policy: String,
    service: String,
    revision: u64,
    strict: bool,
    grants: Vec<(String, VolumeKind, Vec<VolumeTag>)>,
    admitted: bool,
}

struct Inner {
    store: EncryptedStore,
    token: RunningToken,
    changes: HashMap<ChangeId, ChangeRecord>,
    sessions: HashMap<SessionToken, SessionEntry>,
    live: HashMap<(String, String), SessionToken>,
}

struct Shared {
    inner: Mutex<Inner>,
    settled: Condvar,
    counter: Arc<PlatformCounter>,
    transport: Arc<dyn ApprovalTransport>,
    entropy: SharedEntropy,
    identity: SigningKeyPair,
    /// The only quoting authority whose reports are accepted.
    quoting_authority: PublicKey,
    mre: Measurement,
    report: AttestationReport,
    certificate: Mutex<Option<InstanceCertificate>>,
}

/// Where an instance keeps its sealed identity and database.
#[derive(Debug, Clone)]
pub enum Storage {
    Memory,
    Dir(PathBuf),
}

pub struct ServiceOptions {
    pub storage: Storage,
    pub transport: Arc<dyn ApprovalTransport>,
    pub entropy: SharedEntropy,
    /// Measurement the instance runs under; defaults to [`service_measurement`].
    pub mre: Measurement,
}

impl ServiceOptions {
    pub fn new(storage: Storage, transport: Arc<dyn ApprovalTransport>, entropy: SharedEntropy) -> Self {
        Self {
            storage,
            transport,
            entropy,
            mre: service_measurement(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SealedIdentity {
    identity: KeyMaterial,
    db_key: KeyMaterial,
}

/// Unseals the instance identity and database key, creating them on first start.
pub fn load_identity(
    dir: &Path,
    platform: &Platform,
    mre: &Measurement,
    entropy: &dyn EntropySource,
) -> Result<(SigningKeyPair, KeyMaterial), ServiceError> {
    let path = dir.join(IDENTITY_FILE);
    if path.exists() {
        let blob = serde_json::from_slice(&fs::read(&path).map_err(TeeError::Io)?)
            .map_err(|e| TeeError::InvalidState(e.to_string()))?;
        let raw = platform.unseal(mre, &blob)?;
        let sealed: SealedIdentity =
            serde_json::from_slice(&raw).map_err(|e| TeeError::InvalidState(e.to_string()))?;
        return Ok((SigningKeyPair::from_secret_bytes(sealed.identity.0), sealed.db_key));
    }
    let identity = SigningKeyPair::generate(entropy);
    let db_key = KeyMaterial::generate(entropy);
    let plain = serde_json::to_vec(&SealedIdentity {
        identity: KeyMaterial(identity.secret_bytes()),
        db_key,
    })
    .expect("serializable");
    let blob = platform.seal(mre, &plain, entropy);
    fs::create_dir_all(dir).map_err(TeeError::Io)?;
    crate::util::write_atomic(&path, &serde_json::to_vec(&blob).expect("serializable")).map_err(TeeError::Io)?;
    Ok((identity, db_key))
}

/// Opens the instance's database from its data directory.
pub fn open_instance_store(
    dir: &Path,
    platform: &Platform,
    mre: &Measurement,
    entropy: SharedEntropy,
) -> Result<(SigningKeyPair, EncryptedStore), ServiceError> {
    let (identity, db_key) = load_identity(dir, platform, mre, entropy.as_ref())?;
    let store = EncryptedStore::open(dir.join(DB_DIR), db_key.to_key(KeyPurpose::DbEncryption), entropy)?;
    Ok((identity, store))
}

/// Offline recovery after an unclean shutdown.
pub fn override_unclean_shutdown(
    dir: &Path,
    platform: &Platform,
    counter: &PlatformCounter,
    confirm: bool,
    reason: &str,
    entropy: SharedEntropy,
) -> Result<u64, ServiceError> {
    if !confirm {
        return Err(GuardError::NotConfirmed.into());
    }
    let (_, mut store) = open_instance_store(dir, platform, &service_measurement(), entropy)?;
    Ok(rollback::override_unclean_shutdown(&mut store, counter, confirm, reason)?)
}

#[derive(Clone)]
pub struct TrustService {
    shared: Arc<Shared>,
}

impl fmt::Debug for TrustService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustService")
            .field("mre", &self.shared.mre)
            .field("identity", &self.shared.identity.public_key())
            .finish_non_exhaustive()
    }
}

impl TrustService {
    /// Unseals or creates the identity, opens the database, passes the
    /// startup guard and attests itself.
    pub fn start(
        platform: &Platform,
        quoting: &QuotingAuthority,
        counter: Arc<PlatformCounter>,
        opts: ServiceOptions,
    ) -> Result<Self, ServiceError> {
        let (identity, store) = match &opts.storage {
            Storage::Memory => {
                let e = opts.entropy.as_ref();
                let key = crypto::SymmetricKey::generate(e, KeyPurpose::DbEncryption);
                (SigningKeyPair::generate(e), EncryptedStore::in_memory(key, opts.entropy.clone()))
            }
            Storage::Dir(dir) => open_instance_store(dir, platform, &opts.mre, opts.entropy.clone())?,
        };
        let token = rollback::startup_guard(&store, counter.as_ref())?;
        let report = instance_self_attest(&identity, platform.id(), opts.mre, quoting)?;
        log::info!(
            "instance admitted at version {} counter {}",
            token.version(),
            token.counter()
        );
        Ok(Self {
            shared: Arc::new(Shared {
                inner: Mutex::new(Inner {
                    store,
                    token,
                    changes: HashMap::new(),
                    sessions: HashMap::new(),
                    live: HashMap::new(),
                }),
                settled: Condvar::new(),
                counter,
                transport: opts.transport,
                entropy: opts.entropy,
                identity,
                quoting_authority: quoting.public_key(),
                mre: opts.mre,
                report,
                certificate: Mutex::new(None),
            }),
        })
    }

    pub fn identity(&self) -> &SigningKeyPair {
        &self.shared.identity
    }

    pub fn mre(&self) -> Measurement {
        self.shared.mre
    }

    /// Self-attestation report binding the identity key to the measurement.
    pub fn report(&self) -> AttestationReport {
        self.shared.report
    }

    pub fn quoting_authority(&self) -> PublicKey {
        self.shared.quoting_authority
    }

    pub fn certificate(&self) -> Option<InstanceCertificate> {
        self.shared.certificate.lock().expect("certificate").clone()
    }

    pub fn install_certificate(&self, cert: InstanceCertificate) {
        *self.shared.certificate.lock().expect("certificate") = Some(cert);
    }

    pub fn health(&self) -> Health {
        let inner = self.shared.lock();
        Health {
            running: inner.token.is_live(),
            version: inner.store.version(),
            counter: self.shared.counter.read(),
            mre: self.shared.mre,
        }
    }

    /// Commits `v = c`. Afterwards every request is refused.
    pub fn shutdown(&self) -> Result<u64, ServiceError> {
        let mut inner = self.shared.lock();
        let Inner { store, token, .. } = &mut *inner;
        let v = rollback::shutdown_commit(store, self.shared.counter.as_ref(), token)?;
        self.shared.settled.notify_all();
        Ok(v)
    }

    /// Runs `f` over the store state; for inspection and tests.
    pub fn with_state<R>(&self, f: impl FnOnce(&StoreState) -> R) -> R {
        f(self.shared.lock().store.state())
    }

    pub fn audit_len(&self) -> usize {
        self.shared.lock().store.audit().len()
    }

    pub fn create_policy(&self, requester: &PublicKey, doc: PolicyDocument) -> Result<ChangeView, ServiceError> {
        let name = doc.name.clone();
        self.submit(requester, ChangeAction::Create, &name, Some(doc))
    }

    pub fn update_policy(&self, requester: &PublicKey, doc: PolicyDocument) -> Result<ChangeView, ServiceError> {
        let name = doc.name.clone();
        self.submit(requester, ChangeAction::Update, &name, Some(doc))
    }

    pub fn delete_policy(&self, requester: &PublicKey, name: &str) -> Result<ChangeView, ServiceError> {
        self.submit(requester, ChangeAction::Delete, name, None)
    }

    pub fn request_secrets(&self, requester: &PublicKey, name: &str) -> Result<ChangeView, ServiceError> {
        self.submit(requester, ChangeAction::ReadSecrets, name, None)
    }

    pub fn get_policy(&self, requester: &PublicKey, name: &str) -> Result<PolicyView, ServiceError> {
        let inner = self.shared.running()?;
        let p = owned(inner.store.state(), requester, name)?;
        Ok(PolicyView {
            policy: p.doc.redacted(),
            owner: p.owner,
            revision: p.revision,
        })
    }

    /// Tag records of the policy's volumes.
    pub fn policy_tags(&self, requester: &PublicKey, name: &str) -> Result<Vec<TagRecord>, ServiceError> {
        let inner = self.shared.running()?;
        owned(inner.store.state(), requester, name)?;
        Ok(inner
            .store
            .state()
            .tags
            .get(name)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default())
    }

    pub fn change(&self, requester: &PublicKey, id: &ChangeId) -> Result<ChangeView, ServiceError> {
        let inner = self.shared.lock();
        change_of(&inner, requester, id).map(|r| r.view.clone())
    }

    /// Blocks until the change leaves `Pending` or `timeout` passes.
    pub fn wait_change(&self, requester: &PublicKey, id: &ChangeId, timeout: Duration) -> Result<ChangeView, ServiceError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.shared.lock();
        loop {
            let view = change_of(&inner, requester, id)?.view.clone();
            let now = Instant::now();
            if view.status != ChangeStatus::Pending || now >= deadline {
                return Ok(view);
            }
            inner = self
                .shared
                .settled
                .wait_timeout(inner, deadline - now)
                .expect("change lock")
                .0;
        }
    }

    /// Secret material released by an applied read-secrets change.
    pub fn released_secrets(&self, requester: &PublicKey, id: &ChangeId) -> Result<SecretsView, ServiceError> {
        let inner = self.shared.lock();
        let rec = change_of(&inner, requester, id)?;
        match (&rec.view.action, &rec.released) {
            (ChangeAction::ReadSecrets, Some(s)) => Ok(s.clone()),
            (ChangeAction::ReadSecrets, None) => Err(ServiceError::Conflict(format!(
                "change is {:?}",
                rec.view.status
            ))),
            _ => Err(ServiceError::Invalid("not a read-secrets change".into())),
        }
    }

    fn submit(
        &self,
        requester: &PublicKey,
        action: ChangeAction,
        name: &str,
        after: Option<PolicyDocument>,
    ) -> Result<ChangeView, ServiceError> {
        let owner = requester.fingerprint();
        let mut inner = self.shared.running()?;
        let state = inner.store.state();
        let existing = state.policies.get(name);
        let before = match action {
            ChangeAction::Create => {
                if existing.is_some() {
                    return Err(ServiceError::Conflict(format!("policy name {name:?} is taken")));
                }
                None
            }
            _ => Some(owned(state, requester, name)?),
        };
        if action != ChangeAction::ReadSecrets
            && inner
                .changes
                .values()
                .any(|c| c.view.policy == name && c.view.status == ChangeStatus::Pending && c.view.action != ChangeAction::ReadSecrets)
        {
            return Err(ServiceError::Conflict(format!("a change to {name:?} is already pending")));
        }
        let before_doc = before.map(|p| &p.doc);
        if let Some(doc) = &after {
            doc.validate()?;
            if !doc.is_resolved() {
                return Err(PolicyError::Unresolved(doc.unresolved_vars()).into());
            }
            check_imports(state, doc)?;
        }
        if action == ChangeAction::Delete {
            check_not_imported(state, name)?;
        }
        let digest = change_digest(action, name, before_doc, after.as_ref());
        let boards = required_boards(action, before_doc, after.as_ref());
        let id = ChangeId(crypto::random_array(self.shared.entropy.as_ref()));
        let record = ChangeRecord {
            view: ChangeView {
                id,
                action,
                policy: name.to_string(),
                digest,
                status: ChangeStatus::Pending,
                reason: None,
                boards: boards
                    .iter()
                    .map(|(role, b)| BoardProgress {
                        role: *role,
                        decision: evaluate_board(b, std::iter::empty()),
                    })
                    .collect(),
            },
            requester: owner,
            after,
            base_revision: before.map(|p| p.revision),
            released: None,
        };
        inner.changes.insert(id, record);
        if boards.is_empty() {
            self.shared.finish(&mut inner, id, true, None);
            return Ok(inner.changes[&id].view.clone());
        }
        let view = inner.changes[&id].view.clone();
        drop(inner);
        let req = ApprovalRequest {
            policy: name.to_string(),
            change_digest: digest,
            nonce: ApprovalNonce::random(self.shared.entropy.as_ref()),
            summary: format!("{action:?} {name}"),
        };
        let shared = self.shared.clone();
        thread::Builder::new()
            .name(format!("votes-{name}"))
            .spawn(move || shared.collect_votes(id, boards, req))
            .map_err(|e| ServiceError::Invalid(format!("cannot start vote collection: {e}")))?;
        Ok(view)
    }

    /// First phase of application startup: checks the report and policy,
    /// applies the restart gate and releases the configuration.
    pub fn attest_session(
        &self,
        report: &AttestationReport,
        channel_key: &PublicKey,
        policy: &str,
        service: &str,
    ) -> Result<SessionConfig, ServiceError> {
        let mut inner = self.shared.running()?;
        let state = inner.store.state();
        let stored = state.policies.get(policy);
        let svc = check_session_report(report, &self.shared.quoting_authority, channel_key, stored.map(|p| &p.doc), service)
            .map_err(ServiceError::Attestation)?;
        let stored = stored.expect("checked");
        let doc = &stored.doc;
        check_imports(state, doc)?;
        for (src, _) in doc.imports_of(ImportKind::Volume).chain(doc.imports_of(ImportKind::Secret)) {
            let source = &state.policies.get(src).ok_or(ServiceError::Policy(PolicyError::MissingExport(
                format!("source policy {src:?} does not exist"),
            )))?;
            resolve_exports(&source.doc, doc)?;
        }

        let mut secrets = state.secrets.get(policy).cloned().unwrap_or_default();
        for (src, item) in doc.imports_of(ImportKind::Secret) {
            let v = state
                .secrets
                .get(src)
                .and_then(|m| m.get(item))
                .ok_or_else(|| ServiceError::Policy(PolicyError::MissingExport(format!("{src}/{item}"))))?;
            secrets.insert(item.to_string(), v.clone());
        }

        let mut volumes = Vec::new();
        let imported_image = svc
            .image_name
            .as_deref()
            .and_then(|img| doc.imports_of(ImportKind::Image).find(|(_, i)| *i == img).map(|(p, _)| p));
        if let Some(src) = imported_image {
            let image_policy = &state
                .policies
                .get(src)
                .ok_or_else(|| ServiceError::Policy(PolicyError::MissingExport(format!("image policy {src:?}"))))?
                .doc;
            let pairs = permitted_combinations(image_policy, doc, service)?;
            let tags: Vec<VolumeTag> = pairs.iter().filter(|(m, _)| *m == report.mre).map(|(_, t)| *t).collect();
            if tags.is_empty() {
                return Err(ServiceError::CombinationRejected);
            }
            let image = image_policy.image(svc.image_name.as_deref().expect("imported")).expect("granted");
            let key = svc
                .fspf_key
                .as_ref()
                .or(image.fspf_key.as_ref())
                .and_then(Value::lit)
                .ok_or_else(|| ServiceError::Invalid("imported image has no file-system key".into()))?;
            volumes.push(root_grant(*key, tags));
        } else if svc.fspf_path.is_some() || svc.fspf_key.is_some() {
            let local_image_key = svc.image_name.as_deref().and_then(|i| doc.image(i)).and_then(|i| i.fspf_key.as_ref());
            let key = svc
                .fspf_key
                .as_ref()
                .or(local_image_key)
                .and_then(Value::lit)
                .ok_or_else(|| ServiceError::Invalid("root file system has no key".into()))?;
            let tags = svc.fspf_tag.as_ref().and_then(Value::lit).copied().into_iter().collect();
            volumes.push(root_grant(*key, tags));
        }

        let mounts: Vec<(String, String)> = match svc.image_name.as_deref().and_then(|i| doc.image(i)) {
            Some(image) => image.volumes.iter().map(|m| (m.name.clone(), m.path.clone())).collect(),
            None => doc
                .volumes
                .iter()
                .map(|v| v.name.as_str())
                .chain(doc.imports_of(ImportKind::Volume).map(|(_, n)| n))
                .map(|n| (n.to_string(), format!("/{n}")))
                .collect(),
        };
        let mut missing_exit = Vec::new();
        for (name, mount) in mounts {
            if doc.volume(&name).is_some() {
                let record = state.tag_record(policy, &name);
                if check_restart_gate(svc.strict, &name, record).map_err(ServiceError::Admission)?
                    == Admission::MissingExit
                {
                    missing_exit.push(name.clone());
                }
                let key = state
                    .volume_keys
                    .get(policy)
                    .and_then(|m| m.get(&name))
                    .ok_or_else(|| ServiceError::Invalid(format!("volume {name:?} has no key")))?;
                volumes.push(VolumeGrant {
                    expected_tags: vec![record.map_or(VolumeTag::empty(), |r| r.expected)],
                    name,
                    mount,
                    kind: VolumeKind::Data,
                    key: *key,
                    writable: true,
                });
            } else {
                let src = doc
                    .imports_of(ImportKind::Volume)
                    .find(|(_, n)| *n == name)
                    .map(|(p, _)| p)
                    .ok_or_else(|| ServiceError::Invalid(format!("unknown volume {name:?}")))?;
                let key = state
                    .volume_keys
                    .get(src)
                    .and_then(|m| m.get(&name))
                    .ok_or_else(|| ServiceError::Policy(PolicyError::MissingExport(format!("{src}/{name}"))))?;
                volumes.push(VolumeGrant {
                    expected_tags: vec![state.tag_record(src, &name).map_or(VolumeTag::empty(), |r| r.expected)],
                    name,
                    mount,
                    kind: VolumeKind::Imported,
                    key: *key,
                    writable: false,
                });
            }
        }

        let render = |s: &str| inject_str(s, &secrets).map_err(|e| ServiceError::Invalid(e.to_string()));
        let argv = svc.command.0.iter().map(|a| render(a)).collect::<Result<Vec<_>, _>>()?;
        let env = svc
            .environment
            .iter()
            .map(|(k, v)| Ok((k.clone(), render(v)?)))
            .collect::<Result<BTreeMap<_, _>, ServiceError>>()?;

        let session = SessionToken::random(self.shared.entropy.as_ref());
        let config = SessionConfig {
            session,
            policy: policy.to_string(),
            service: service.to_string(),
            argv,
            env,
            pwd: svc.pwd.clone(),
            secrets,
            volumes,
            injection_files: svc.injection_files.clone(),
            strict: svc.strict,
        };
        let entry = SessionEntry {
            policy: policy.to_string(),
            service: service.to_string(),
            revision: stored.revision,
            strict: svc.strict,
            grants: config
                .volumes
                .iter()
                .map(|v| (v.name.clone(), v.kind, v.expected_tags.clone()))
                .collect(),
            admitted: false,
        };
        if let Some(old) = inner.live.insert((policy.to_string(), service.to_string()), session) {
            inner.sessions.remove(&old);
        }
        inner.sessions.insert(session, entry);
        if !missing_exit.is_empty() {
            inner.store.commit(
                Some(channel_key.fingerprint()),
                vec![Mutation::Note {
                    text: format!(
                        "{policy}/{service}: restart without exit tag on {}",
                        missing_exit.join(", ")
                    ),
                }],
            )?;
        }
        Ok(config)
    }

    /// Second phase: the session presents the tags of its opened volumes.
    /// Only admitted sessions may push tags.
    pub fn admit(&self, session: &SessionToken, presented: &BTreeMap<String, VolumeTag>) -> Result<(), ServiceError> {
        let mut inner = self.shared.running()?;
        let entry = inner.sessions.get(session).ok_or(ServiceError::UnknownSession)?;
        let state = inner.store.state();
        if state.policies.get(&entry.policy).map(|p| p.revision) != Some(entry.revision) {
            return Err(ServiceError::Superseded);
        }
        for (name, kind, expected) in &entry.grants {
            let tag = *presented
                .get(name)
                .ok_or_else(|| ServiceError::Invalid(format!("no tag presented for volume {name:?}")))?;
            match kind {
                VolumeKind::Data => {
                    let record = state.tag_record(&entry.policy, name);
                    admit_restart(entry.strict, name, record, VolumeTag::empty(), tag)
                        .map_err(ServiceError::Admission)?;
                }
                VolumeKind::Root | VolumeKind::Imported => {
                    if !expected.is_empty() && !expected.contains(&tag) {
                        return Err(ServiceError::Admission(AdmitRefusal::Freshness {
                            volume: name.clone(),
                            expected: expected[0],
                            presented: tag,
                        }));
                    }
                }
            }
        }
        inner.sessions.get_mut(session).expect("present").admitted = true;
        Ok(())
    }

    /// Records the tag of a writable volume. Durable before returning the
    /// sequence number.
    pub fn push_tag(
        &self,
        session: &SessionToken,
        volume: &str,
        tag: VolumeTag,
        event: TagEvent,
    ) -> Result<u64, ServiceError> {
        let mut inner = self.shared.running()?;
        let entry = inner.sessions.get(session).ok_or(ServiceError::UnknownSession)?;
        let key = (entry.policy.clone(), entry.service.clone());
        if inner.live.get(&key) != Some(session) {
            return Err(ServiceError::Superseded);
        }
        match inner.store.state().policies.get(&entry.policy) {
            None => return Err(ServiceError::UnknownSession),
            Some(p) if p.revision != entry.revision => return Err(ServiceError::Superseded),
            Some(_) => {}
        }
        if !entry.admitted {
            return Err(ServiceError::Invalid("session not admitted".into()));
        }
        if !entry
            .grants
            .iter()
            .any(|(n, k, _)| n == volume && *k == VolumeKind::Data)
        {
            return Err(ServiceError::Invalid(format!("volume {volume:?} is not writable by this session")));
        }
        let m = Mutation::PushTag {
            policy: entry.policy.clone(),
            volume: volume.to_string(),
            service: entry.service.clone(),
            tag,
            event,
        };
        inner.store.commit(None, vec![m])?;
        Ok(inner.store.state().tag_sequence)
    }
}

fn root_grant(key: KeyMaterial, expected_tags: Vec<VolumeTag>) -> VolumeGrant {
    VolumeGrant {
        name: ROOT_VOLUME.to_string(),
        mount: "/".to_string(),
        kind: VolumeKind::Root,
        key,
        expected_tags,
        writable: false,
    }
}

fn owned<'a>(state: &'a StoreState, requester: &PublicKey, name: &str) -> Result<&'a crate::store::StoredPolicy, ServiceError> {
    match state.policies.get(name) {
        Some(p) if p.owner == requester.fingerprint() => Ok(p),
        _ => Err(ServiceError::NotFound),
    }
}

fn change_of<'a>(inner: &'a Inner, requester: &PublicKey, id: &ChangeId) -> Result<&'a ChangeRecord, ServiceError> {
    match inner.changes.get(id) {
        Some(r) if r.requester == requester.fingerprint() => Ok(r),
        _ => Err(ServiceError::NotFound),
    }
}

/// Imports from existing policies must be granted; imports from policies
/// that do not exist yet are checked when a session starts.
fn check_imports(state: &StoreState, doc: &PolicyDocument) -> Result<(), ServiceError> {
    for src in doc.import_sources() {
        if let Some(source) = state.policies.get(src) {
            resolve_exports(&source.doc, doc)?;
        }
    }
    Ok(())
}

fn check_not_imported(state: &StoreState, name: &str) -> Result<(), ServiceError> {
    let importers: Vec<&str> = state
        .policies
        .values()
        .filter(|p| p.doc.name != name && p.doc.import_sources().contains(name))
        .map(|p| p.doc.name.as_str())
        .collect();
    if importers.is_empty() {
        Ok(())
    } else {
        Err(ServiceError::Conflict(format!(
            "policy is imported by {}",
            importers.join(", ")
        )))
    }
}

/// Mutations activating `doc`: the document itself, materialized secrets,
/// volume keys, and tag resets for volumes whose `fspf_tag` changed.
fn activation(
    state: &StoreState,
    before: Option<&PolicyDocument>,
    doc: &PolicyDocument,
    owner: Digest,
    entropy: &dyn EntropySource,
) -> Vec<Mutation> {
    let old_secrets = state.secrets.get(&doc.name);
    let mut secrets = BTreeMap::new();
    for s in &doc.secrets {
        let value = match s.kind {
            SecretKind::Explicit => s.value.clone().expect("validated"),
            SecretKind::Generated => {
                let size = s.size.expect("validated");
                let unchanged = before
                    .and_then(|b| b.secret(&s.name))
                    .is_some_and(|o| o.kind == SecretKind::Generated && o.size == Some(size));
                match old_secrets.and_then(|m| m.get(&s.name)) {
                    Some(v) if unchanged => v.clone(),
                    _ => {
                        let mut buf = vec![0u8; size];
                        entropy.fill(&mut buf);
                        hex::encode(buf)
                    }
                }
            }
        };
        secrets.insert(s.name.clone(), value);
    }
    let old_keys = state.volume_keys.get(&doc.name);
    let keys = doc
        .volumes
        .iter()
        .map(|v| {
            let key = v
                .fspf_key
                .as_ref()
                .and_then(Value::lit)
                .copied()
                .or_else(|| old_keys.and_then(|m| m.get(&v.name)).copied())
                .unwrap_or_else(|| KeyMaterial::generate(entropy));
            (v.name.clone(), key)
        })
        .collect();
    let mut out = vec![
        Mutation::PutPolicy { doc: doc.clone(), owner },
        Mutation::PutSecrets {
            policy: doc.name.clone(),
            values: secrets,
        },
        Mutation::PutVolumeKeys {
            policy: doc.name.clone(),
            keys,
        },
    ];
    for v in &doc.volumes {
        let Some(tag) = v.fspf_tag.as_ref().and_then(Value::lit) else { continue };
        let old = before
            .and_then(|b| b.volume(&v.name))
            .and_then(|o| o.fspf_tag.as_ref())
            .and_then(Value::lit);
        if old != Some(tag) {
            out.push(Mutation::ResetTag {
                policy: doc.name.clone(),
                volume: v.name.clone(),
                tag: *tag,
            });
        }
    }
    out
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("service lock")
    }

    fn running(&self) -> Result<MutexGuard<'_, Inner>, ServiceError> {
        let inner = self.lock();
        if inner.token.is_live() {
            Ok(inner)
        } else {
            Err(ServiceError::NotRunning)
        }
    }

    /// Settles a pending change. An approved change is re-checked against
    /// the current state before it is applied.
    fn finish(&self, inner: &mut Inner, id: ChangeId, approved: bool, reason: Option<String>) {
        let outcome = if !approved {
            Err((ChangeStatus::Rejected, reason.unwrap_or_else(|| "rejected by the board".into())))
        } else if !inner.token.is_live() {
            Err((ChangeStatus::Failed, "service shut down".into()))
        } else {
            self.apply(inner, id).map_err(|e| (ChangeStatus::Failed, e.to_string()))
        };
        let rec = inner.changes.get_mut(&id).expect("change exists");
        match outcome {
            Ok(released) => {
                rec.view.status = ChangeStatus::Applied;
                rec.released = released;
            }
            Err((status, reason)) => {
                log::info!("change {id} on {}: {reason}", rec.view.policy);
                rec.view.status = status;
                rec.view.reason = Some(reason);
            }
        }
        self.settled.notify_all();
    }

    fn apply(&self, inner: &mut Inner, id: ChangeId) -> Result<Option<SecretsView>, ServiceError> {
        let rec = &inner.changes[&id];
        let name = rec.view.policy.clone();
        let state = inner.store.state();
        let current = state.policies.get(&name);
        if current.map(|p| p.revision) != rec.base_revision {
            return Err(ServiceError::Conflict("policy changed while the change was pending".into()));
        }
        let actor = Some(rec.requester);
        let mutations = match rec.view.action {
            ChangeAction::ReadSecrets => {
                return Ok(Some(SecretsView {
                    secrets: state.secrets.get(&name).cloned().unwrap_or_default(),
                    volume_keys: state.volume_keys.get(&name).cloned().unwrap_or_default(),
                }))
            }
            ChangeAction::Delete => {
                check_not_imported(state, &name)?;
                vec![Mutation::DeletePolicy { name: name.clone() }]
            }
            ChangeAction::Create | ChangeAction::Update => {
                let doc = rec.after.as_ref().expect("document");
                check_imports(state, doc)?;
                let owner = current.map_or(rec.requester, |p| p.owner);
                activation(state, current.map(|p| &p.doc), doc, owner, self.entropy.as_ref())
            }
        };
        inner.store.commit(actor, mutations)?;
        Ok(None)
    }

    fn collect_votes(self: Arc<Self>, id: ChangeId, boards: Vec<(BoardRole, PolicyBoard)>, req: ApprovalRequest) {
        let (tx, rx) = mpsc::channel::<(usize, String, Result<SignedVote, String>)>();
        for (bi, (_, board)) in boards.iter().enumerate() {
            for member in &board.members {
                let (tx, member, req, transport) = (tx.clone(), member.clone(), req.clone(), self.transport.clone());
                thread::spawn(move || {
                    let res = transport.request_vote(&member, &req);
                    let _ = tx.send((bi, member.name, res));
                });
            }
        }
        drop(tx);
        let start = Instant::now();
        let deadlines: Vec<Instant> = boards.iter().map(|(_, b)| start + b.timeout()).collect();
        let mut votes: Vec<Vec<(String, Vote)>> = vec![Vec::new(); boards.len()];
        let mut heard: Vec<Vec<String>> = vec![Vec::new(); boards.len()];
        let mut responders_done = false;
        loop {
            let now = Instant::now();
            let decisions: Vec<BoardDecision> = boards
                .iter()
                .enumerate()
                .map(|(i, (_, b))| {
                    let d = evaluate_board(b, votes[i].iter().map(|(m, v)| (m.as_str(), *v)));
                    if now >= deadlines[i] {
                        d.at_timeout()
                    } else {
                        d
                    }
                })
                .collect();
            let rejected = decisions.iter().any(|d| d.outcome == Outcome::Rejected);
            // An approval is final only once every veto holder has answered
            // or the board's deadline has passed.
            let vetoes_settled = boards.iter().enumerate().all(|(i, (_, b))| {
                now >= deadlines[i] || b.members.iter().filter(|m| m.veto).all(|m| heard[i].contains(&m.name))
            });
            let approved = vetoes_settled && decisions.iter().all(|d| d.outcome == Outcome::Approved);
            {
                let mut inner = self.lock();
                let Some(rec) = inner.changes.get_mut(&id) else { return };
                for (p, d) in rec.view.boards.iter_mut().zip(&decisions) {
                    p.decision = d.clone();
                }
                if rejected || approved {
                    let reason = rejected.then(|| {
                        if decisions.iter().any(|d| d.vetoed) {
                            "vetoed".to_string()
                        } else {
                            "threshold not reached".to_string()
                        }
                    });
                    self.finish(&mut inner, id, approved, reason);
                    return;
                }
            }
            let next_deadline = deadlines
                .iter()
                .filter(|d| **d > now)
                .min()
                .copied()
                .unwrap_or(now);
            let wait = next_deadline.saturating_duration_since(now);
            if responders_done {
                thread::sleep(wait);
                continue;
            }
            match rx.recv_timeout(wait) {
                Ok((bi, member, Ok(vote))) => {
                    heard[bi].push(member.clone());
                    let board = &boards[bi].1;
                    let valid = vote.member == member
                        && board
                            .member(&member)
                            .is_some_and(|m| vote.verify(&m.certificate, &req));
                    if valid {
                        votes[bi].push((member, vote.verdict));
                    } else {
                        log::warn!("discarding invalid vote from {member} on change {id}");
                    }
                }
                Ok((bi, member, Err(e))) => {
                    log::warn!("no vote from {member}: {e}");
                    heard[bi].push(member);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => responders_done = true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approval::{ApprovalService, LocalApprovers, StaticRule};
    use crate::crypto::SeededEntropy;
    use crate::policy::parse_policy;
    use crate::tee::{CounterClock, DEFAULT_MIN_INCREMENT_INTERVAL};

    struct Fixture {
        svc: TrustService,
        qa: QuotingAuthority,
        platform: Platform,
        entropy: SharedEntropy,
        approvers: LocalApprovers,
    }

    fn fixture() -> Fixture {
        let entropy: SharedEntropy = Arc::new(SeededEntropy::new(9));
        let platform = Platform::generate(entropy.as_ref());
        let qa = QuotingAuthority::generate(entropy.clone());
        qa.register_platform(platform.id());
        let counter = Arc::new(PlatformCounter::in_memory(CounterClock::Virtual, DEFAULT_MIN_INCREMENT_INTERVAL));
        let approvers = LocalApprovers::new();
        let svc = TrustService::start(
            &platform,
            &qa,
            counter,
            ServiceOptions::new(Storage::Memory, Arc::new(approvers.clone()), entropy.clone()),
        )
        .unwrap();
        Fixture {
            svc,
            qa,
            platform,
            entropy,
            approvers,
        }
    }

    fn key(f: &Fixture) -> SigningKeyPair {
        SigningKeyPair::generate(f.entropy.as_ref())
    }

    fn simple_policy(name: &str, mre: Measurement) -> PolicyDocument {
        parse_policy(&format!(
            "name: {name}\nservices:\n  - name: app\n    command: [\"run\", \"--pw=$$pw$$\"]\n    mrenclaves: [\"{mre}\"]\nvolumes:\n  - name: data\nsecrets:\n  - name: pw\n    kind: generated\n    size: 16\n"
        ))
        .unwrap()
    }

    fn with_board(mut doc: PolicyDocument, members: &[(&str, &SigningKeyPair, bool)], threshold: usize, timeout_ms: u64) -> PolicyDocument {
        doc.board = Some(PolicyBoard {
            members: members
                .iter()
                .map(|(n, k, veto)| crate::policy::BoardMember {
                    name: n.to_string(),
                    certificate: k.public_key(),
                    url: format!("local://{n}"),
                    veto: *veto,
                })
                .collect(),
            threshold,
            timeout_ms: Some(timeout_ms),
        });
        doc
    }

    fn approver(f: &Fixture, name: &str, rule: StaticRule) -> SigningKeyPair {
        let k = key(f);
        f.approvers
            .register(format!("local://{name}"), Arc::new(ApprovalService::new(name, k.clone(), Box::new(rule))));
        k
    }

    #[test]
    fn create_without_board_applies_and_materializes_once() {
        let f = fixture();
        let owner = key(&f);
        let v = f.svc.create_policy(&owner.public_key(), simple_policy("p", measure(b"a"))).unwrap();
        assert_eq!(v.status, ChangeStatus::Applied);
        let s1 = f.svc.with_state(|s| s.secrets["p"]["pw"].clone());
        assert_eq!(s1.len(), 32);
        let mut doc = simple_policy("p", measure(b"a"));
        doc.services[0].environment.insert("X".into(), "1".into());
        f.svc.update_policy(&owner.public_key(), doc).unwrap();
        assert_eq!(f.svc.with_state(|s| s.secrets["p"]["pw"].clone()), s1);
    }

    #[test]
    fn other_certificates_see_not_found() {
        let f = fixture();
        let (owner, other) = (key(&f), key(&f));
        f.svc.create_policy(&owner.public_key(), simple_policy("p", measure(b"a"))).unwrap();
        assert!(f.svc.get_policy(&owner.public_key(), "p").is_ok());
        for r in [
            f.svc.get_policy(&other.public_key(), "p").map(|_| ()),
            f.svc.get_policy(&other.public_key(), "nope").map(|_| ()),
            f.svc.update_policy(&other.public_key(), simple_policy("p", measure(b"b"))).map(|_| ()),
            f.svc.delete_policy(&other.public_key(), "p").map(|_| ()),
            f.svc.request_secrets(&other.public_key(), "p").map(|_| ()),
        ] {
            assert!(matches!(r, Err(ServiceError::NotFound)), "{r:?}");
        }
        assert_eq!(f.svc.get_policy(&owner.public_key(), "p").unwrap().revision, 1);
    }

    #[test]
    fn board_approval_and_timeout() {
        let f = fixture();
        let owner = key(&f);
        let a = approver(&f, "a", StaticRule::ApproveAll);
        let b = key(&f);
        let doc = with_board(simple_policy("p", measure(b"a")), &[("a", &a, false), ("b", &b, false)], 1, 5_000);
        let v = f.svc.create_policy(&owner.public_key(), doc).unwrap();
        let v = f.svc.wait_change(&owner.public_key(), &v.id, Duration::from_secs(5)).unwrap();
        assert_eq!(v.status, ChangeStatus::Applied);

        // threshold 2 with one unreachable member: pending until timeout
        let doc = with_board(simple_policy("q", measure(b"a")), &[("a", &a, false), ("b", &b, false)], 2, 300);
        let v = f.svc.create_policy(&owner.public_key(), doc).unwrap();
        thread::sleep(Duration::from_millis(100));
        assert_eq!(f.svc.change(&owner.public_key(), &v.id).unwrap().status, ChangeStatus::Pending);
        let v = f.svc.wait_change(&owner.public_key(), &v.id, Duration::from_secs(5)).unwrap();
        assert_eq!(v.status, ChangeStatus::Rejected);
        assert!(f.svc.get_policy(&owner.public_key(), "q").is_err());
    }

    #[test]
    fn veto_rejects_and_secrets_need_approval() {
        let f = fixture();
        let owner = key(&f);
        let a = approver(&f, "a", StaticRule::ApproveAll);
        let v = approver(&f, "v", StaticRule::RejectAll);
        let doc = with_board(simple_policy("p", measure(b"a")), &[("a", &a, false), ("v", &v, true)], 1, 2_000);
        let c = f.svc.create_policy(&owner.public_key(), doc.clone()).unwrap();
        let c = f.svc.wait_change(&owner.public_key(), &c.id, Duration::from_secs(5)).unwrap();
        assert_eq!(c.status, ChangeStatus::Rejected);

        let doc = with_board(simple_policy("p", measure(b"a")), &[("a", &a, false)], 1, 2_000);
        let c = f.svc.create_policy(&owner.public_key(), doc).unwrap();
        f.svc.wait_change(&owner.public_key(), &c.id, Duration::from_secs(5)).unwrap();
        let r = f.svc.request_secrets(&owner.public_key(), "p").unwrap();
        let r = f.svc.wait_change(&owner.public_key(), &r.id, Duration::from_secs(5)).unwrap();
        assert_eq!(r.status, ChangeStatus::Applied);
        let s = f.svc.released_secrets(&owner.public_key(), &r.id).unwrap();
        assert_eq!(s.secrets["pw"].len(), 32);
        assert!(s.volume_keys.contains_key("data"));
    }

    #[test]
    fn session_lifecycle_and_supersede() {
        let f = fixture();
        let owner = key(&f);
        let mre = measure(b"app");
        f.svc.create_policy(&owner.public_key(), simple_policy("p", mre)).unwrap();
        let eph = key(&f);
        let report = f.qa.issue_report(f.platform.id(), mre, eph.public_key()).unwrap();
        let cfg = f
            .svc
            .attest_session(&report, &eph.public_key(), "p", "app")
            .unwrap();
        let pw = f.svc.with_state(|s| s.secrets["p"]["pw"].clone());
        assert_eq!(cfg.argv, vec!["run".to_string(), format!("--pw={pw}")]);
        let data = cfg.volumes.iter().find(|v| v.name == "data").unwrap();
        assert_eq!(data.expected_tags, vec![VolumeTag::empty()]);
        let t1 = VolumeTag(hash(b"t1"));
        assert!(f.svc.push_tag(&cfg.session, "data", t1, TagEvent::Close).is_err());
        let presented = BTreeMap::from([("data".to_string(), VolumeTag::empty())]);
        f.svc.admit(&cfg.session, &presented).unwrap();
        let s1 = f.svc.push_tag(&cfg.session, "data", t1, TagEvent::Close).unwrap();
        let s2 = f.svc.push_tag(&cfg.session, "data", t1, TagEvent::Exit).unwrap();
        assert_eq!(s2, s1 + 1);

        let cfg2 = f
            .svc
            .attest_session(&report, &eph.public_key(), "p", "app")
            .unwrap();
        assert_eq!(cfg2.volumes.iter().find(|v| v.name == "data").unwrap().expected_tags, vec![t1]);
        assert!(matches!(
            f.svc.push_tag(&cfg.session, "data", t1, TagEvent::Close),
            Err(ServiceError::UnknownSession | ServiceError::Superseded)
        ));
        let stale = BTreeMap::from([("data".to_string(), VolumeTag::empty())]);
        assert!(matches!(
            f.svc.admit(&cfg2.session, &stale),
            Err(ServiceError::Admission(AdmitRefusal::Freshness { .. }))
        ));
    }

    #[test]
    fn delete_refused_while_imported() {
        let f = fixture();
        let owner = key(&f);
        let mut src = simple_policy("src", measure(b"a"));
        src.volumes[0].export = crate::policy::Exports(vec!["dst".into()]);
        f.svc.create_policy(&owner.public_key(), src).unwrap();
        let dst = parse_policy(&format!(
            "name: dst\nservices:\n  - name: app\n    command: run\n    mrenclaves: [\"{}\"]\nimports:\n  - policy: src\n    volume: data\n",
            measure(b"b")
        ))
        .unwrap();
        f.svc.create_policy(&owner.public_key(), dst).unwrap();
        assert!(matches!(f.svc.delete_policy(&owner.public_key(), "src"), Err(ServiceError::Conflict(_))));
        f.svc.delete_policy(&owner.public_key(), "dst").unwrap();
        assert_eq!(f.svc.delete_policy(&owner.public_key(), "src").unwrap().status, ChangeStatus::Applied);
    }

    #[test]
    fn shutdown_refuses_further_requests() {
        let f = fixture();
        let owner = key(&f);
        assert_eq!(f.svc.shutdown().unwrap(), 1);
        assert!(matches!(
            f.svc.create_policy(&owner.public_key(), simple_policy("p", measure(b"a"))),
            Err(ServiceError::NotRunning)
        ));
        assert!(f.svc.shutdown().is_err());
    }
}
