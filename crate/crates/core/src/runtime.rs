//! Application-side runtime: the startup handshake, shielded file access
//! and tag pushes on close, sync and exit.
//!
//! Volume keys never leave the runtime; application code sees only
//! argv, environment, secrets and plaintext through the file API.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use crate::attestation::{SessionConfig, SessionToken, VolumeKind};
use crate::crypto::{hash_parts, EntropySource, KeyPurpose, SigningKeyPair};
use crate::fs_shield::{ShieldError, ShieldedVolume, VolumeTag};
use crate::service::{ServiceError, TrustService};
use crate::tags::TagEvent;
use crate::tee::{measure, AttestationReport, Measurement, PlatformId, QuotingAuthority, TeeError};

/// Environment variable naming the policy of an application.
pub const POLICY_ENV: &str = "WARDEN_POLICY";
/// Environment variable naming the service within the policy.
pub const SERVICE_ENV: &str = "WARDEN_SERVICE";

/// Refusal carried back from the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct Refusal {
    pub code: String,
    pub message: String,
    pub status: u16,
}

impl From<ServiceError> for Refusal {
    fn from(e: ServiceError) -> Self {
        Self {
            code: e.code().to_string(),
            message: e.to_string(),
            status: e.http_status(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("refused by service: {0}")]
    Refused(Refusal),
    #[error("transport: {0}")]
    Transport(String),
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Refused(r) => Some(&r.code),
            ClientError::Transport(_) => None,
        }
    }
}

/// The session-facing operations of the trust service.
pub trait ServiceClient: Send + Sync {
    fn attest(&self, report: &AttestationReport, policy: &str, service: &str) -> Result<SessionConfig, ClientError>;
    fn admit(&self, session: &SessionToken, presented: &BTreeMap<String, VolumeTag>) -> Result<(), ClientError>;
    fn push_tag(&self, session: &SessionToken, volume: &str, tag: VolumeTag, event: TagEvent) -> Result<u64, ClientError>;
}

/// Opens a channel authenticated by the application's ephemeral key.
pub trait Connector {
    fn connect(&self, channel: &SigningKeyPair) -> Result<Arc<dyn ServiceClient>, ClientError>;
}

/// In-process client; the channel key is the one it was connected with.
pub struct LocalClient {
    service: TrustService,
    channel: crate::crypto::PublicKey,
}

impl LocalClient {
    pub fn new(service: TrustService, channel: crate::crypto::PublicKey) -> Self {
        Self { service, channel }
    }
}

impl ServiceClient for LocalClient {
    fn attest(&self, report: &AttestationReport, policy: &str, service: &str) -> Result<SessionConfig, ClientError> {
        self.service
            .attest_session(report, &self.channel, policy, service)
            .map_err(|e| ClientError::Refused(e.into()))
    }

    fn admit(&self, session: &SessionToken, presented: &BTreeMap<String, VolumeTag>) -> Result<(), ClientError> {
        self.service
            .admit(session, presented)
            .map_err(|e| ClientError::Refused(e.into()))
    }

    fn push_tag(&self, session: &SessionToken, volume: &str, tag: VolumeTag, event: TagEvent) -> Result<u64, ClientError> {
        self.service
            .push_tag(session, volume, tag, event)
            .map_err(|e| ClientError::Refused(e.into()))
    }
}

impl Connector for TrustService {
    fn connect(&self, channel: &SigningKeyPair) -> Result<Arc<dyn ServiceClient>, ClientError> {
        Ok(Arc::new(LocalClient::new(self.clone(), channel.public_key())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("quoting authority: {0}")]
    Quote(#[from] TeeError),
    #[error(transparent)]
    Service(#[from] ClientError),
    #[error("no host directory configured for volume {0:?}")]
    NoVolumeDir(String),
    #[error("volume {volume}: {source}")]
    Volume { volume: String, source: ShieldError },
    #[error("path {0:?} is not on a mounted volume")]
    Unmounted(String),
    #[error("volume {0:?} is read-only")]
    ReadOnly(String),
    #[error("tag push failed: {0}")]
    Push(String),
}

impl RuntimeError {
    /// True when the volume's tag differs from the expected one.
    pub fn is_freshness(&self) -> bool {
        match self {
            RuntimeError::Volume { source, .. } => {
                matches!(source, ShieldError::TagMismatch { .. } | ShieldError::Freshness { .. })
            }
            RuntimeError::Service(e) => e.code() == Some("freshness-violation"),
            _ => false,
        }
    }
}

/// Process exit status after an exit whose tags were not acknowledged.
pub const EXIT_UNACKED_TAG: i32 = 5;

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    pub policy: String,
    pub service: String,
    /// The application's code bundle; its hash is the measurement.
    pub code: Vec<u8>,
    /// Host directory of each granted volume, by volume name.
    pub volume_dirs: BTreeMap<String, PathBuf>,
}

impl RuntimeOptions {
    /// Reads policy and service names from [`POLICY_ENV`] and [`SERVICE_ENV`].
    pub fn from_env(code: Vec<u8>, volume_dirs: BTreeMap<String, PathBuf>) -> Result<Self, RuntimeError> {
        Ok(Self {
            policy: std::env::var(POLICY_ENV).map_err(|_| RuntimeError::MissingEnv(POLICY_ENV))?,
            service: std::env::var(SERVICE_ENV).map_err(|_| RuntimeError::MissingEnv(SERVICE_ENV))?,
            code,
            volume_dirs,
        })
    }

    pub fn measurement(&self) -> Measurement {
        measure(&self.code)
    }
}

struct Mounted {
    name: String,
    mount: String,
    writable: bool,
    volume: Arc<Mutex<ShieldedVolume>>,
}

#[derive(Default)]
struct PushQueue {
    pending: BTreeMap<String, TagEvent>,
    stop: bool,
    flush: bool,
    in_flight: bool,
    errors: Vec<String>,
    pushed: u64,
}

/// Coalesces close and sync pushes per volume; only the latest state of a
/// volume is pushed.
struct Pusher {
    queue: Arc<(Mutex<PushQueue>, Condvar)>,
    handle: Option<JoinHandle<()>>,
}

impl Pusher {
    fn start(client: Arc<dyn ServiceClient>, session: SessionToken, volumes: BTreeMap<String, Arc<Mutex<ShieldedVolume>>>) -> Self {
        let queue: Arc<(Mutex<PushQueue>, Condvar)> = Arc::default();
        let q = queue.clone();
        let handle = thread::Builder::new()
            .name("tag-pusher".into())
            .spawn(move || {
                let (lock, cv) = &*q;
                loop {
                    let batch = {
                        let mut g = lock.lock().expect("push queue");
                        while g.pending.is_empty() && !g.stop {
                            g = cv.wait(g).expect("push queue");
                        }
                        if g.pending.is_empty() || (g.stop && !g.flush) {
                            g.in_flight = false;
                            cv.notify_all();
                            return;
                        }
                        g.in_flight = true;
                        std::mem::take(&mut g.pending)
                    };
                    let mut errors = Vec::new();
                    let mut pushed = 0;
                    for (name, event) in batch {
                        let res = volumes[&name]
                            .lock()
                            .expect("volume")
                            .sync()
                            .map_err(|e| e.to_string())
                            .and_then(|tag| client.push_tag(&session, &name, tag, event).map_err(|e| e.to_string()));
                        match res {
                            Ok(_) => pushed += 1,
                            Err(e) => errors.push(format!("{name}: {e}")),
                        }
                    }
                    let mut g = lock.lock().expect("push queue");
                    g.in_flight = false;
                    g.pushed += pushed;
                    g.errors.extend(errors);
                    cv.notify_all();
                }
            })
            .expect("spawn tag pusher");
        Self {
            queue,
            handle: Some(handle),
        }
    }

    fn request(&self, volume: &str, event: TagEvent) {
        let (lock, cv) = &*self.queue;
        let mut g = lock.lock().expect("push queue");
        let e = g.pending.entry(volume.to_string()).or_insert(event);
        if event == TagEvent::Sync {
            *e = TagEvent::Sync;
        }
        cv.notify_all();
    }

    /// Waits until every requested push has been attempted.
    fn drain(&self) {
        let (lock, cv) = &*self.queue;
        let mut g = lock.lock().expect("push queue");
        while !g.pending.is_empty() || g.in_flight {
            g = cv.wait(g).expect("push queue");
        }
    }

    fn stop(&mut self, flush: bool) {
        {
            let (lock, cv) = &*self.queue;
            let mut g = lock.lock().expect("push queue");
            g.stop = true;
            g.flush = flush;
            cv.notify_all();
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    fn take_errors(&self) -> Vec<String> {
        std::mem::take(&mut self.queue.0.lock().expect("push queue").errors)
    }

    fn pushed(&self) -> u64 {
        self.queue.0.lock().expect("push queue").pushed
    }
}

/// A running, admitted application.
pub struct ApplicationContext {
    policy: String,
    service: String,
    argv: Vec<String>,
    env: BTreeMap<String, String>,
    pwd: Option<String>,
    secrets: BTreeMap<String, String>,
    strict: bool,
    session: SessionToken,
    mounts: Vec<Mounted>,
    client: Arc<dyn ServiceClient>,
    pusher: Pusher,
    exited: bool,
}

impl fmt::Debug for ApplicationContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApplicationContext")
            .field("policy", &self.policy)
            .field("service", &self.service)
            .field("argv", &self.argv)
            .field("mounts", &self.mounts.iter().map(|m| &m.mount).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

/// Attests the application and opens its volumes. Nothing is returned to
/// application code unless the service admitted the session.
pub fn startup(
    opts: &RuntimeOptions,
    platform: PlatformId,
    quoting: &QuotingAuthority,
    connector: &dyn Connector,
    entropy: &dyn EntropySource,
) -> Result<ApplicationContext, RuntimeError> {
    let channel = SigningKeyPair::generate(entropy);
    let report = quoting.issue_report(platform, opts.measurement(), channel.public_key())?;
    let client = connector.connect(&channel)?;
    let config = client.attest(&report, &opts.policy, &opts.service)?;
    ApplicationContext::from_config(config, opts, client)
}

impl ApplicationContext {
    fn from_config(
        config: SessionConfig,
        opts: &RuntimeOptions,
        client: Arc<dyn ServiceClient>,
    ) -> Result<Self, RuntimeError> {
        let mut mounts = Vec::new();
        let mut presented = BTreeMap::new();
        for grant in &config.volumes {
            let dir = opts
                .volume_dirs
                .get(&grant.name)
                .ok_or_else(|| RuntimeError::NoVolumeDir(grant.name.clone()))?;
            let key = grant.key.to_key(KeyPurpose::FsEncryption);
            let verr = |source| RuntimeError::Volume {
                volume: grant.name.clone(),
                source,
            };
            let volume = match grant.kind {
                VolumeKind::Data => ShieldedVolume::open_or_create(dir, key).map_err(verr)?,
                VolumeKind::Root | VolumeKind::Imported => ShieldedVolume::open(dir, key).map_err(verr)?,
            };
            if !grant.expected_tags.is_empty() {
                volume.verify_against(&grant.expected_tags).map_err(verr)?;
            }
            presented.insert(grant.name.clone(), volume.tag());
            mounts.push(Mounted {
                name: grant.name.clone(),
                mount: grant.mount.clone(),
                writable: grant.writable,
                volume: Arc::new(Mutex::new(volume)),
            });
        }
        let mut ctx_mounts = mounts;
        ctx_mounts.sort_by_key(|m| std::cmp::Reverse(m.mount.len()));
        for path in &config.injection_files {
            let (m, rel) = resolve(&ctx_mounts, config.pwd.as_deref(), path)?;
            m.volume
                .lock()
                .expect("volume")
                .inject_file(&rel, &config.secrets)
                .map_err(|source| RuntimeError::Volume {
                    volume: m.name.clone(),
                    source,
                })?;
        }
        client.admit(&config.session, &presented)?;
        let writable = ctx_mounts
            .iter()
            .filter(|m| m.writable)
            .map(|m| (m.name.clone(), m.volume.clone()))
            .collect();
        let pusher = Pusher::start(client.clone(), config.session, writable);
        Ok(Self {
            policy: config.policy,
            service: config.service,
            argv: config.argv,
            env: config.env,
            pwd: config.pwd,
            secrets: config.secrets,
            strict: config.strict,
            session: config.session,
            mounts: ctx_mounts,
            client,
            pusher,
            exited: false,
        })
    }

    pub fn policy(&self) -> &str {
        &self.policy
    }

    pub fn service(&self) -> &str {
        &self.service
    }

    pub fn argv(&self) -> &[String] {
        &self.argv
    }

    pub fn env(&self) -> &BTreeMap<String, String> {
        &self.env
    }

    pub fn pwd(&self) -> Option<&str> {
        self.pwd.as_deref()
    }

    pub fn secret(&self, name: &str) -> Option<&str> {
        self.secrets.get(name).map(String::as_str)
    }

    pub fn secret_names(&self) -> BTreeSet<&str> {
        self.secrets.keys().map(String::as_str).collect()
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    pub fn mounts(&self) -> Vec<(&str, &str, bool)> {
        self.mounts
            .iter()
            .map(|m| (m.name.as_str(), m.mount.as_str(), m.writable))
            .collect()
    }

    /// Current tag of a mounted volume.
    pub fn volume_tag(&self, name: &str) -> Option<VolumeTag> {
        self.mounts
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.volume.lock().expect("volume").tag())
    }

    /// Number of tag pushes acknowledged by the service so far.
    pub fn pushes_acknowledged(&self) -> u64 {
        self.pusher.pushed()
    }

    pub fn read(&self, path: &str) -> Result<Vec<u8>, RuntimeError> {
        let (m, rel) = resolve(&self.mounts, self.pwd.as_deref(), path)?;
        let volume = m.volume.lock().expect("volume");
        volume.read_file(&rel).map_err(|source| RuntimeError::Volume {
            volume: m.name.clone(),
            source,
        })
    }

    pub fn write(&self, path: &str, data: &[u8]) -> Result<(), RuntimeError> {
        let (m, rel) = self.writable(path)?;
        m.volume
            .lock()
            .expect("volume")
            .write_file(&rel, data)
            .map(|_| ())
            .map_err(|source| RuntimeError::Volume {
                volume: m.name.clone(),
                source,
            })
    }

    pub fn remove(&self, path: &str) -> Result<(), RuntimeError> {
        let (m, rel) = self.writable(path)?;
        m.volume
            .lock()
            .expect("volume")
            .remove_file(&rel)
            .map(|_| ())
            .map_err(|source| RuntimeError::Volume {
                volume: m.name.clone(),
                source,
            })
    }

    /// Closing a file on a writable volume schedules a `close` push.
    pub fn close(&self, path: &str) -> Result<(), RuntimeError> {
        let (m, _) = resolve(&self.mounts, self.pwd.as_deref(), path)?;
        if m.writable {
            self.pusher.request(&m.name, TagEvent::Close);
        }
        Ok(())
    }

    /// Persists every writable volume and schedules `sync` pushes.
    pub fn sync(&self) -> Result<(), RuntimeError> {
        for m in self.mounts.iter().filter(|m| m.writable) {
            m.volume.lock().expect("volume").sync().map_err(|source| RuntimeError::Volume {
                volume: m.name.clone(),
                source,
            })?;
            self.pusher.request(&m.name, TagEvent::Sync);
        }
        Ok(())
    }

    /// Waits for scheduled pushes and reports any that failed.
    pub fn flush(&self) -> Result<(), RuntimeError> {
        self.pusher.drain();
        let errors = self.pusher.take_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(RuntimeError::Push(errors.join("; ")))
        }
    }

    /// Open, read, increment, write and close an 8-byte counter file.
    pub fn counter_increment(&self, path: &str) -> Result<u64, RuntimeError> {
        let (m, rel) = self.writable(path)?;
        let v = m
            .volume
            .lock()
            .expect("volume")
            .file_counter_increment(&rel)
            .map_err(|source| RuntimeError::Volume {
                volume: m.name.clone(),
                source,
            })?;
        self.pusher.request(&m.name, TagEvent::Close);
        Ok(v)
    }

    /// Persists all writable volumes and pushes their tags with the `exit`
    /// event, returning only after the service acknowledged every push.
    pub fn exit(mut self) -> Result<(), RuntimeError> {
        self.exited = true;
        self.pusher.stop(true);
        let mut errors = self.pusher.take_errors();
        for m in self.mounts.iter().filter(|m| m.writable) {
            let res = m
                .volume
                .lock()
                .expect("volume")
                .sync()
                .map_err(|e| e.to_string())
                .and_then(|tag| {
                    self.client
                        .push_tag(&self.session, &m.name, tag, TagEvent::Exit)
                        .map_err(|e| e.to_string())
                });
            if let Err(e) = res {
                errors.push(format!("{}: {e}", m.name));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(RuntimeError::Push(errors.join("; ")))
        }
    }

    /// Terminates without persisting or pushing anything, as if killed.
    pub fn kill(mut self) {
        self.exited = true;
        self.pusher.stop(false);
    }

    fn writable(&self, path: &str) -> Result<(&Mounted, String), RuntimeError> {
        let (m, rel) = resolve(&self.mounts, self.pwd.as_deref(), path)?;
        if !m.writable {
            return Err(RuntimeError::ReadOnly(m.name.clone()));
        }
        Ok((m, rel))
    }
}

impl Drop for ApplicationContext {
    fn drop(&mut self) {
        if !self.exited {
            self.pusher.stop(false);
        }
    }
}

/// Exit status for the outcome of [`ApplicationContext::exit`].
pub fn exit_status(result: &Result<(), RuntimeError>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(RuntimeError::Push(_)) => EXIT_UNACKED_TAG,
        Err(_) => 1,
    }
}

/// Longest-prefix mount lookup; `mounts` is sorted by descending mount length.
fn resolve<'a>(mounts: &'a [Mounted], pwd: Option<&str>, path: &str) -> Result<(&'a Mounted, String), RuntimeError> {
    let abs = if path.starts_with('/') {
        path.to_string()
    } else {
        format!("{}/{}", pwd.unwrap_or("/").trim_end_matches('/'), path)
    };
    for m in mounts {
        let mount = m.mount.trim_end_matches('/');
        if mount.is_empty() {
            return Ok((m, abs.trim_start_matches('/').to_string()));
        }
        if let Some(rest) = abs.strip_prefix(mount) {
            if rest.is_empty() || rest.starts_with('/') {
                return Ok((m, rest.trim_start_matches('/').to_string()));
            }
        }
    }
    Err(RuntimeError::Unmounted(path.to_string()))
}

/// Demo applications driven through the runtime.
pub mod demo {
    use super::*;

    /// Increments `path` `n` times and exits.
    pub fn counter_app(ctx: ApplicationContext, path: &str, n: u64) -> Result<u64, RuntimeError> {
        let mut last = 0;
        for _ in 0..n {
            last = ctx.counter_increment(path)?;
        }
        ctx.exit()?;
        Ok(last)
    }

    /// Reads an encrypted model and input, writes an encrypted result to
    /// the output path, and returns the plaintext result.
    pub fn inference_app(ctx: ApplicationContext, model: &str, input: &str, output: &str) -> Result<Vec<u8>, RuntimeError> {
        let m = ctx.read(model)?;
        let i = ctx.read(input)?;
        let label = hash_parts(&[b"inference:", &m, &i]);
        let result = format!("label={}\n", &label.to_string()[..16]).into_bytes();
        ctx.write(output, &result)?;
        ctx.close(output)?;
        ctx.exit()?;
        Ok(result)
    }

    /// Path of the demo files within an image root volume.
    pub fn image_paths(root: &Path) -> (PathBuf, PathBuf) {
        (root.join("app/model.bin"), root.join("app/input.bin"))
    }
}
