//! Python bindings: keys, measurements, reports, policies, board
//! evaluation, shielded volumes, an embeddable service instance and an
//! HTTPS client for a remote one.
//!
//! Structured results cross the boundary as JSON-decoded Python values.

use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;
use warden_core::attestation::ClientTrust;
use warden_core::crypto::{self, KeyPurpose, OsEntropy, PublicKey, SharedEntropy, Signature, SigningKeyPair, SymmetricKey};
use warden_core::fs_shield::{ShieldedVolume, VolumeTag};
use warden_core::policy::{self, PolicyBoard, Vote};
use warden_core::runtime::{self, demo, RuntimeError, RuntimeOptions};
use warden_core::service::{ChangeId, ServiceError, ServiceOptions, Storage, TrustService};
use warden_core::tee::{
    self, AttestationReport, CounterClock, Measurement, Platform, PlatformCounter, PlatformId, QuotingAuthority,
    DEFAULT_MIN_INCREMENT_INTERVAL,
};
use warden_server::api::serve_service;
use warden_server::approval::HttpApprovers;
use warden_server::tls::ServerTrust;
use warden_server::{attest_instance, HttpsClient, ServerHandle};

create_exception!(warden, WardenError, PyException, "Raised with `(code, message)` arguments.");

/// Error carrying a machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: String,
    pub message: String,
}

impl Failure {
    fn new(code: &str, message: impl ToString) -> Self {
        Self { code: code.into(), message: message.to_string() }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        Self::new(e.code(), e)
    }
}

impl From<runtime::ClientError> for Failure {
    fn from(e: runtime::ClientError) -> Self {
        let code = e.code().unwrap_or("transport").to_string();
        Self { code, message: e.to_string() }
    }
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        let code = match &e {
            RuntimeError::Service(c) => c.code().unwrap_or("transport").to_string(),
            e if e.is_freshness() => "freshness-violation".into(),
            _ => "runtime".into(),
        };
        Self { code, message: e.to_string() }
    }
}

impl From<Failure> for PyErr {
    fn from(f: Failure) -> Self {
        WardenError::new_err((f.code, f.message))
    }
}

type Res<T> = Result<T, Failure>;

fn bad_input(e: impl ToString) -> Failure {
    Failure::new("invalid-input", e)
}

fn parse<T: std::str::FromStr>(s: &str) -> Res<T>
where
    T::Err: ToString,
{
    s.parse().map_err(bad_input)
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| WardenError::new_err(("encoding", e.to_string())))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn bytes<'py>(py: Python<'py>, data: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, data)
}

// ---- plain operations, shared by the Python wrappers and unit tests ----

pub fn measure_hex(code: &[u8]) -> String {
    tee::measure(code).to_string()
}

/// Parses, validates and re-serializes a policy document.
pub fn canonical_policy(yaml: &str) -> Res<String> {
    let doc = policy::parse_policy(yaml).map_err(|e| Failure::new("invalid-policy", e))?;
    Ok(doc.to_yaml())
}

/// Votes are `member -> "approve" | "reject"`, counted in key order.
pub fn board_decision(board_yaml: &str, votes: &BTreeMap<String, String>) -> Res<policy::BoardDecision> {
    let board: PolicyBoard = serde_yaml::from_str(board_yaml).map_err(bad_input)?;
    let parsed = votes
        .iter()
        .map(|(m, v)| match v.as_str() {
            "approve" => Ok((m.as_str(), Vote::Approve)),
            "reject" => Ok((m.as_str(), Vote::Reject)),
            other => Err(bad_input(format!("vote must be approve or reject, got {other:?}"))),
        })
        .collect::<Res<Vec<_>>>()?;
    Ok(policy::evaluate_board(&board, parsed))
}

pub fn report_fields(raw: &[u8], authority: &str) -> Res<(AttestationReport, bool)> {
    let report = AttestationReport::from_bytes(raw).map_err(|e| Failure::new("malformed-report", e))?;
    let qa: PublicKey = parse(authority)?;
    Ok((report, report.verify(&qa)))
}

fn volume_key(key: &[u8]) -> Res<SymmetricKey> {
    SymmetricKey::from_slice(key, KeyPurpose::FsEncryption).map_err(bad_input)
}

fn shield(e: warden_core::fs_shield::ShieldError) -> Failure {
    let code = match e {
        warden_core::fs_shield::ShieldError::TagMismatch { .. } | warden_core::fs_shield::ShieldError::Freshness { .. } => {
            "freshness-violation"
        }
        _ => "volume",
    };
    Failure::new(code, e)
}

// ---- Python surface ----

/// Measurement (hex) of a code bundle.
#[pyfunction]
fn measure(code: &[u8]) -> String {
    measure_hex(code)
}

/// SHA-256 (hex).
#[pyfunction]
fn digest(data: &[u8]) -> String {
    crypto::hash(data).to_string()
}

/// Validates a policy document and returns it re-serialized.
#[pyfunction]
fn parse_policy(yaml: &str) -> PyResult<String> {
    Ok(canonical_policy(yaml)?)
}

#[pyfunction]
fn evaluate_board(py: Python<'_>, board_yaml: &str, votes: BTreeMap<String, String>) -> PyResult<Py<PyAny>> {
    to_py(py, &board_decision(board_yaml, &votes)?)
}

/// Decodes a raw report and checks its signature under `authority` (hex).
#[pyfunction]
fn verify_report(py: Python<'_>, raw: &[u8], authority: &str) -> PyResult<Py<PyAny>> {
    let (r, valid) = report_fields(raw, authority)?;
    #[derive(Serialize)]
    struct View {
        valid: bool,
        platform: PlatformId,
        mre: Measurement,
        pubkey: PublicKey,
    }
    to_py(py, &View { valid, platform: r.platform, mre: r.mre, pubkey: r.bound_pubkey })
}

/// AEAD-encrypts under a 32-byte key; output is `nonce ‖ ciphertext ‖ tag`.
#[pyfunction]
#[pyo3(signature = (key, plaintext, aad = b"".as_slice()))]
fn seal<'py>(py: Python<'py>, key: &[u8], plaintext: &[u8], aad: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let k = volume_key(key)?;
    Ok(bytes(py, &crypto::seal_encrypt(&k, &OsEntropy, plaintext, aad)))
}

#[pyfunction]
#[pyo3(signature = (key, sealed, aad = b"".as_slice()))]
fn unseal<'py>(py: Python<'py>, key: &[u8], sealed: &[u8], aad: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let k = volume_key(key)?;
    let pt = crypto::seal_decrypt(&k, sealed, aad).map_err(|e| Failure::new("authentication", e))?;
    Ok(bytes(py, &pt))
}

#[pyfunction]
fn verify_signature(public_key: &str, message: &[u8], signature: &[u8]) -> PyResult<bool> {
    let pk: PublicKey = parse(public_key)?;
    let Ok(sig) = Signature::from_slice(signature) else { return Ok(false) };
    Ok(pk.verify(message, &sig))
}

/// Checks a running instance against a quoting authority and an
/// allow-list of measurements.
#[pyfunction]
fn attest(py: Python<'_>, addr: &str, quoting_authority: &str, permitted: Vec<String>) -> PyResult<Py<PyAny>> {
    let trust = ClientTrust::Explicit {
        quoting_authority: parse(quoting_authority)?,
        permitted: permitted.iter().map(|m| parse(m)).collect::<Res<BTreeSet<Measurement>>>()?,
    };
    let probe = SigningKeyPair::generate(&OsEntropy);
    let verdict = py.detach(|| attest_instance(addr, &probe, &trust)).map_err(Failure::from)?;
    to_py(py, &verdict)
}

/// Ed25519 key pair.
#[pyclass(module = "warden", frozen, skip_from_py_object)]
#[derive(Clone)]
struct SigningKey(SigningKeyPair);

#[pymethods]
impl SigningKey {
    #[new]
    #[pyo3(signature = (secret = None))]
    fn new(secret: Option<&[u8]>) -> PyResult<Self> {
        match secret {
            None => Ok(Self(SigningKeyPair::generate(&OsEntropy))),
            Some(s) => Ok(Self(SigningKeyPair::from_secret_slice(s).map_err(bad_input)?)),
        }
    }

    #[getter]
    fn public_key(&self) -> String {
        self.0.public_key().to_string()
    }

    fn secret<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        bytes(py, &self.0.secret_bytes())
    }

    fn sign<'py>(&self, py: Python<'py>, message: &[u8]) -> Bound<'py, PyBytes> {
        bytes(py, &self.0.sign(message).0)
    }

    fn __repr__(&self) -> String {
        format!("SigningKey({})", self.public_key())
    }
}

/// Simulated TEE platform with its quoting authority.
#[pyclass(module = "warden", frozen, name = "QuotingAuthority")]
struct PyQuotingAuthority {
    qa: QuotingAuthority,
}

#[pymethods]
impl PyQuotingAuthority {
    #[new]
    fn new() -> Self {
        let entropy: SharedEntropy = crypto::os_entropy();
        Self { qa: QuotingAuthority::generate(entropy) }
    }

    #[getter]
    fn public_key(&self) -> String {
        self.qa.public_key().to_string()
    }

    /// Registers a fresh platform and returns its id (hex).
    fn new_platform(&self) -> String {
        let id = PlatformId::random(&OsEntropy);
        self.qa.register_platform(id);
        id.to_string()
    }

    fn issue_report<'py>(&self, py: Python<'py>, platform: &str, mre: &str, bound_key: &str) -> PyResult<Bound<'py, PyBytes>> {
        let report = self
            .qa
            .issue_report(parse(platform)?, parse(mre)?, parse(bound_key)?)
            .map_err(|e| Failure::new("quote", e))?;
        Ok(bytes(py, &report.to_bytes()))
    }
}

/// Encrypted, integrity-protected directory.
#[pyclass(module = "warden", name = "ShieldedVolume")]
struct PyVolume(Mutex<ShieldedVolume>);

impl PyVolume {
    fn with<R>(&self, f: impl FnOnce(&mut ShieldedVolume) -> Result<R, warden_core::fs_shield::ShieldError>) -> PyResult<R> {
        let mut v = self.0.lock().expect("volume");
        Ok(f(&mut v).map_err(shield)?)
    }
}

#[pymethods]
impl PyVolume {
    /// Opens the volume at `root`, creating it when `create` is set.
    /// `expected` lists acceptable tags; opening fails on any other.
    #[new]
    #[pyo3(signature = (root, key, create = false, expected = None))]
    fn new(root: PathBuf, key: &[u8], create: bool, expected: Option<Vec<String>>) -> PyResult<Self> {
        let key = volume_key(key)?;
        let vol = if create {
            ShieldedVolume::open_or_create(&root, key)
        } else {
            ShieldedVolume::open(&root, key)
        }
        .map_err(shield)?;
        if let Some(tags) = expected {
            let tags = tags.iter().map(|t| parse(t)).collect::<Res<Vec<VolumeTag>>>()?;
            vol.verify_against(&tags).map_err(shield)?;
        }
        Ok(Self(Mutex::new(vol)))
    }

    #[getter]
    fn tag(&self) -> String {
        self.0.lock().expect("volume").tag().to_string()
    }

    fn files(&self) -> Vec<String> {
        self.0.lock().expect("volume").files().map(|(p, _)| p.to_string()).collect()
    }

    fn write(&self, path: &str, data: &[u8]) -> PyResult<String> {
        Ok(self.with(|v| v.write_file(path, data))?.to_string())
    }

    fn read<'py>(&self, py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyBytes>> {
        Ok(bytes(py, &self.with(|v| v.read_file(path))?))
    }

    fn remove(&self, path: &str) -> PyResult<String> {
        Ok(self.with(|v| v.remove_file(path))?.to_string())
    }

    /// Persists metadata; returns the volume tag.
    fn sync(&self) -> PyResult<String> {
        Ok(self.with(|v| v.sync())?.to_string())
    }
}

/// Trust service running inside this process, optionally serving HTTPS.
#[pyclass(module = "warden")]
struct Instance {
    entropy: SharedEntropy,
    platform: Platform,
    qa: QuotingAuthority,
    service: TrustService,
    server: Mutex<Option<ServerHandle>>,
}

impl Instance {
    fn owner(&self, key: &SigningKey) -> PublicKey {
        key.0.public_key()
    }

    fn run<R: Send>(
        &self,
        py: Python<'_>,
        policy: &str,
        service: &str,
        code: &[u8],
        volumes: BTreeMap<String, PathBuf>,
        app: impl FnOnce(runtime::ApplicationContext) -> Result<R, RuntimeError> + Send,
    ) -> Res<R> {
        let opts = RuntimeOptions {
            policy: policy.into(),
            service: service.into(),
            code: code.to_vec(),
            volume_dirs: volumes,
        };
        py.detach(|| {
            let ctx = runtime::startup(&opts, self.platform.id(), &self.qa, &self.service, self.entropy.as_ref())?;
            app(ctx)
        })
        .map_err(Failure::from)
    }
}

#[pymethods]
impl Instance {
    /// `data_dir` keeps sealed state across instances; without it state is
    /// in memory. With `serve`, an HTTPS endpoint listens on loopback.
    #[new]
    #[pyo3(signature = (data_dir = None, serve = true))]
    fn new(py: Python<'_>, data_dir: Option<PathBuf>, serve: bool) -> PyResult<Self> {
        let entropy = crypto::os_entropy();
        let platform = Platform::generate(entropy.as_ref());
        let qa = QuotingAuthority::generate(entropy.clone());
        qa.register_platform(platform.id());
        let counter = Arc::new(PlatformCounter::in_memory(CounterClock::Virtual, DEFAULT_MIN_INCREMENT_INTERVAL));
        let transport = Arc::new(HttpApprovers::new(SigningKeyPair::generate(entropy.as_ref())));
        let storage = data_dir.map_or(Storage::Memory, Storage::Dir);
        let service = TrustService::start(&platform, &qa, counter, ServiceOptions::new(storage, transport, entropy.clone()))
            .map_err(Failure::from)?;
        let server = if serve {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| Failure::new("io", e))?;
            let svc = service.clone();
            Some(py.detach(|| serve_service(listener, svc, 2)).map_err(|e| Failure::new("io", e))?)
        } else {
            None
        };
        Ok(Self { entropy, platform, qa, service, server: Mutex::new(server) })
    }

    /// `host:port` of the HTTPS endpoint, if serving.
    #[getter]
    fn addr(&self) -> Option<String> {
        self.server.lock().expect("server").as_ref().map(|s| s.addr().to_string())
    }

    #[getter]
    fn service_key(&self) -> String {
        self.service.identity().public_key().to_string()
    }

    #[getter]
    fn mre(&self) -> String {
        self.service.mre().to_string()
    }

    #[getter]
    fn quoting_authority(&self) -> String {
        self.qa.public_key().to_string()
    }

    #[getter]
    fn platform(&self) -> String {
        self.platform.id().to_string()
    }

    fn health(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.service.health())
    }

    fn create_policy(&self, py: Python<'_>, owner: &SigningKey, yaml: &str) -> PyResult<Py<PyAny>> {
        let doc = policy::parse_policy(yaml).map_err(|e| Failure::new("invalid-policy", e))?;
        let v = py.detach(|| self.service.create_policy(&self.owner(owner), doc)).map_err(Failure::from)?;
        to_py(py, &v)
    }

    fn update_policy(&self, py: Python<'_>, owner: &SigningKey, yaml: &str) -> PyResult<Py<PyAny>> {
        let doc = policy::parse_policy(yaml).map_err(|e| Failure::new("invalid-policy", e))?;
        let v = py.detach(|| self.service.update_policy(&self.owner(owner), doc)).map_err(Failure::from)?;
        to_py(py, &v)
    }

    fn delete_policy(&self, py: Python<'_>, owner: &SigningKey, name: &str) -> PyResult<Py<PyAny>> {
        let v = py.detach(|| self.service.delete_policy(&self.owner(owner), name)).map_err(Failure::from)?;
        to_py(py, &v)
    }

    /// Redacted policy with owner and revision.
    fn get_policy(&self, py: Python<'_>, owner: &SigningKey, name: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.service.get_policy(&self.owner(owner), name).map_err(Failure::from)?)
    }

    fn policy_tags(&self, py: Python<'_>, owner: &SigningKey, name: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.service.policy_tags(&self.owner(owner), name).map_err(Failure::from)?)
    }

    fn request_secrets(&self, py: Python<'_>, owner: &SigningKey, name: &str) -> PyResult<Py<PyAny>> {
        let v = py.detach(|| self.service.request_secrets(&self.owner(owner), name)).map_err(Failure::from)?;
        to_py(py, &v)
    }

    #[pyo3(signature = (owner, change_id, wait = 0.0))]
    fn change(&self, py: Python<'_>, owner: &SigningKey, change_id: &str, wait: f64) -> PyResult<Py<PyAny>> {
        let id: ChangeId = parse(change_id)?;
        let pk = self.owner(owner);
        let v = py
            .detach(|| self.service.wait_change(&pk, &id, Duration::from_secs_f64(wait.max(0.0))))
            .map_err(Failure::from)?;
        to_py(py, &v)
    }

    fn released_secrets(&self, py: Python<'_>, owner: &SigningKey, change_id: &str) -> PyResult<Py<PyAny>> {
        let id: ChangeId = parse(change_id)?;
        to_py(py, &self.service.released_secrets(&self.owner(owner), &id).map_err(Failure::from)?)
    }

    /// Runs the counter demo as service `service` of `policy`; returns the
    /// final counter value.
    fn run_counter(
        &self,
        py: Python<'_>,
        policy: &str,
        service: &str,
        code: &[u8],
        volumes: BTreeMap<String, PathBuf>,
        path: &str,
        count: u64,
    ) -> PyResult<u64> {
        let path = path.to_string();
        Ok(self.run(py, policy, service, code, volumes, move |ctx| demo::counter_app(ctx, &path, count))?)
    }

    /// Runs the inference demo; returns the plaintext result.
    #[allow(clippy::too_many_arguments)]
    fn run_inference<'py>(
        &self,
        py: Python<'py>,
        policy: &str,
        service: &str,
        code: &[u8],
        volumes: BTreeMap<String, PathBuf>,
        model: &str,
        input: &str,
        output: &str,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let (m, i, o) = (model.to_string(), input.to_string(), output.to_string());
        let out = self.run(py, policy, service, code, volumes, move |ctx| demo::inference_app(ctx, &m, &i, &o))?;
        Ok(bytes(py, &out))
    }

    /// Stops serving and records a clean shutdown.
    fn shutdown(&self, py: Python<'_>) -> PyResult<u64> {
        let server = self.server.lock().expect("server").take();
        py.detach(|| {
            if let Some(s) = server {
                s.stop();
            }
            self.service.shutdown()
        })
        .map_err(|e| Failure::from(e).into())
    }
}

/// Mutual-TLS client for a remote instance whose key is pinned.
#[pyclass(module = "warden")]
struct Client(HttpsClient);

#[pymethods]
impl Client {
    #[new]
    fn new(addr: &str, key: &SigningKey, service_key: &str) -> PyResult<Self> {
        let pinned: PublicKey = parse(service_key)?;
        Ok(Self(HttpsClient::for_key(addr, &key.0, ServerTrust::Pinned(pinned)).map_err(Failure::from)?))
    }

    fn health(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.health()).map_err(Failure::from)?)
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let r = py.detach(|| self.0.report()).map_err(Failure::from)?;
        Ok(bytes(py, &r.to_bytes()))
    }

    fn create_policy(&self, py: Python<'_>, name: &str, yaml: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.create_policy(name, yaml)).map_err(Failure::from)?)
    }

    fn update_policy(&self, py: Python<'_>, name: &str, yaml: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.update_policy(name, yaml)).map_err(Failure::from)?)
    }

    fn delete_policy(&self, py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.delete_policy(name)).map_err(Failure::from)?)
    }

    fn get_policy(&self, py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.get_policy(name)).map_err(Failure::from)?)
    }

    fn policy_tags(&self, py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.policy_tags(name)).map_err(Failure::from)?)
    }

    fn request_secrets(&self, py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &py.detach(|| self.0.request_secrets(name)).map_err(Failure::from)?)
    }

    #[pyo3(signature = (change_id, wait = None))]
    fn change(&self, py: Python<'_>, change_id: &str, wait: Option<f64>) -> PyResult<Py<PyAny>> {
        let id: ChangeId = parse(change_id)?;
        let wait = wait.map(|w| Duration::from_secs_f64(w.max(0.0)));
        to_py(py, &py.detach(|| self.0.change(&id, wait)).map_err(Failure::from)?)
    }

    fn released_secrets(&self, py: Python<'_>, change_id: &str) -> PyResult<Py<PyAny>> {
        let id: ChangeId = parse(change_id)?;
        to_py(py, &py.detach(|| self.0.released_secrets(&id)).map_err(Failure::from)?)
    }
}

#[pymodule]
fn warden(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WardenError", m.py().get_type::<WardenError>())?;
    m.add("POLICY_ENV", runtime::POLICY_ENV)?;
    m.add("SERVICE_ENV", runtime::SERVICE_ENV)?;
    m.add_function(wrap_pyfunction!(measure, m)?)?;
    m.add_function(wrap_pyfunction!(digest, m)?)?;
    m.add_function(wrap_pyfunction!(parse_policy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_board, m)?)?;
    m.add_function(wrap_pyfunction!(verify_report, m)?)?;
    m.add_function(wrap_pyfunction!(seal, m)?)?;
    m.add_function(wrap_pyfunction!(unseal, m)?)?;
    m.add_function(wrap_pyfunction!(verify_signature, m)?)?;
    m.add_function(wrap_pyfunction!(attest, m)?)?;
    m.add_class::<SigningKey>()?;
    m.add_class::<PyQuotingAuthority>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<Instance>()?;
    m.add_class::<Client>()?;
    Ok(())
}
