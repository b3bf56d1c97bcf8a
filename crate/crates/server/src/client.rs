//! Blocking HTTPS client for the service and approval endpoints.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::client::conn::http1::SendRequest;
use hyper::{Method, Request, StatusCode};
use hyper_util::rt::TokioIo;
use rustls::pki_types::ServerName;
use rustls::ClientConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio_rustls::TlsConnector;
use warden_core::attestation::{
    verify_instance, ClientTrust, InstanceCertificate, InstanceVerdict, Served, SessionConfig, SessionToken,
};
use warden_core::crypto::{OsEntropy, PublicKey, SigningKeyPair};
use warden_core::fs_shield::VolumeTag;
use warden_core::runtime::{ClientError, Connector, Refusal, ServiceClient};
use warden_core::service::{ChangeId, ChangeView, Health, PolicyView, SecretsView};
use warden_core::tags::{TagEvent, TagRecord};
use warden_core::tee::AttestationReport;

use crate::tls::{certificate_for, client_config, ServerTrust, SERVER_NAME};
use crate::wire::{AdmitRequest, Admitted, PolicyBody, SessionRequest, TagPushRequest, TagPushResponse};

fn transport(e: impl std::fmt::Display) -> ClientError {
    ClientError::Transport(e.to_string())
}

/// One kept-alive mutual-TLS connection; requests are serialized.
pub struct HttpsClient {
    addr: String,
    tls: Arc<ClientConfig>,
    /// Always `Some` until drop.
    rt: Option<tokio::runtime::Runtime>,
    conn: Mutex<Option<SendRequest<Full<Bytes>>>>,
    rtt: Duration,
}

impl std::fmt::Debug for HttpsClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpsClient").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Drop for HttpsClient {
    // The last reference may go away on a server runtime thread, where a
    // blocking runtime drop would panic.
    fn drop(&mut self) {
        self.conn.get_mut().map(Option::take).ok();
        if let Some(rt) = self.rt.take() {
            rt.shutdown_background();
        }
    }
}

impl HttpsClient {
    fn rt(&self) -> &tokio::runtime::Runtime {
        self.rt.as_ref().expect("runtime")
    }

    /// `addr` is `host:port`. No connection is made until the first request.
    pub fn new(addr: impl Into<String>, tls: Arc<ClientConfig>) -> Result<Self, ClientError> {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(transport)?;
        Ok(Self {
            addr: addr.into(),
            tls,
            rt: Some(rt),
            conn: Mutex::new(None),
            rtt: Duration::ZERO,
        })
    }

    /// Client authenticating with a self-signed certificate for `key`.
    pub fn for_key(addr: impl Into<String>, key: &SigningKeyPair, trust: ServerTrust) -> Result<Self, ClientError> {
        let cert = certificate_for(key, "warden-client", None, &OsEntropy).map_err(transport)?;
        Self::new(addr, client_config(key, cert, trust).map_err(transport)?)
    }

    /// Adds `rtt` of simulated network delay to every request.
    pub fn with_rtt(mut self, rtt: Duration) -> Self {
        self.rtt = rtt;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    async fn connect_to(addr: &str, tls: Arc<ClientConfig>) -> Result<SendRequest<Full<Bytes>>, ClientError> {
        let tcp = tokio::net::TcpStream::connect(addr).await.map_err(transport)?;
        let _ = tcp.set_nodelay(true);
        let name = ServerName::try_from(SERVER_NAME).map_err(transport)?.to_owned();
        let stream = TlsConnector::from(tls).connect(name, tcp).await.map_err(transport)?;
        let (sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(transport)?;
        tokio::spawn(async move {
            let _ = conn.await;
        });
        Ok(sender)
    }

    /// Establishes the connection now instead of on the first request.
    pub fn connect(&self) -> Result<(), ClientError> {
        let mut slot = self.conn.lock().expect("connection");
        if slot.as_ref().is_some_and(|s| !s.is_closed()) {
            return Ok(());
        }
        let sender = self.rt().block_on(Self::connect_to(&self.addr, self.tls.clone()))?;
        *slot = Some(sender);
        Ok(())
    }

    /// Sends one request and returns the status and body.
    pub fn request(&self, method: Method, path: &str, body: Option<Vec<u8>>) -> Result<(StatusCode, Bytes), ClientError> {
        if !self.rtt.is_zero() {
            std::thread::sleep(self.rtt);
        }
        let mut slot = self.conn.lock().expect("connection");
        let addr = self.addr.clone();
        let tls = self.tls.clone();
        let has_body = body.is_some();
        let req = Request::builder()
            .method(method)
            .uri(path)
            .header(hyper::header::HOST, addr.as_str())
            .header(hyper::header::CONTENT_TYPE, if has_body { "application/json" } else { "text/plain" })
            .body(Full::new(Bytes::from(body.unwrap_or_default())))
            .map_err(transport)?;
        self.rt().block_on(async {
            let mut sender = match slot.take() {
                Some(s) if !s.is_closed() => s,
                _ => Self::connect_to(&addr, tls).await?,
            };
            sender.ready().await.map_err(transport)?;
            let resp = sender.send_request(req).await.map_err(transport)?;
            let status = resp.status();
            let bytes = resp.into_body().collect().await.map_err(transport)?.to_bytes();
            *slot = Some(sender);
            Ok((status, bytes))
        })
    }

    fn call<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<Vec<u8>>) -> Result<T, ClientError> {
        let (status, bytes) = self.request(method, path, body)?;
        if !status.is_success() {
            let refusal = serde_json::from_slice::<Refusal>(&bytes).unwrap_or_else(|_| Refusal {
                code: "http".into(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
                status: status.as_u16(),
            });
            return Err(ClientError::Refused(refusal));
        }
        serde_json::from_slice(&bytes).map_err(transport)
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.call(Method::GET, path, None)
    }

    pub fn send<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: &B) -> Result<T, ClientError> {
        self.call(method, path, Some(serde_json::to_vec(body).map_err(transport)?))
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.get("/health")
    }

    pub fn report(&self) -> Result<AttestationReport, ClientError> {
        let (status, bytes) = self.request(Method::GET, "/report", None)?;
        if !status.is_success() {
            return Err(transport(format!("GET /report: {status}")));
        }
        AttestationReport::from_bytes(&bytes).map_err(transport)
    }

    pub fn certificate(&self) -> Result<InstanceCertificate, ClientError> {
        self.get("/certificate")
    }

    pub fn create_policy(&self, name: &str, yaml: &str) -> Result<ChangeView, ClientError> {
        self.send(Method::POST, &format!("/policy/{name}"), &PolicyBody { policy: yaml.into() })
    }

    pub fn update_policy(&self, name: &str, yaml: &str) -> Result<ChangeView, ClientError> {
        self.send(Method::PUT, &format!("/policy/{name}"), &PolicyBody { policy: yaml.into() })
    }

    pub fn delete_policy(&self, name: &str) -> Result<ChangeView, ClientError> {
        self.call(Method::DELETE, &format!("/policy/{name}"), None)
    }

    pub fn get_policy(&self, name: &str) -> Result<PolicyView, ClientError> {
        self.get(&format!("/policy/{name}"))
    }

    pub fn policy_tags(&self, name: &str) -> Result<Vec<TagRecord>, ClientError> {
        self.get(&format!("/policy/{name}/tags"))
    }

    pub fn request_secrets(&self, name: &str) -> Result<ChangeView, ClientError> {
        self.call(Method::POST, &format!("/policy/{name}/secrets"), None)
    }

    /// Current state of a change; with `wait`, blocks server-side until it settles.
    pub fn change(&self, id: &ChangeId, wait: Option<Duration>) -> Result<ChangeView, ClientError> {
        match wait {
            Some(w) => self.get(&format!("/changes/{id}?wait={}", w.as_millis())),
            None => self.get(&format!("/changes/{id}")),
        }
    }

    pub fn released_secrets(&self, id: &ChangeId) -> Result<SecretsView, ClientError> {
        self.get(&format!("/changes/{id}/secrets"))
    }
}

impl ServiceClient for HttpsClient {
    fn attest(&self, report: &AttestationReport, policy: &str, service: &str) -> Result<SessionConfig, ClientError> {
        self.send(
            Method::POST,
            "/session",
            &SessionRequest {
                report: *report,
                policy: policy.into(),
                service: service.into(),
            },
        )
    }

    fn admit(&self, session: &SessionToken, presented: &BTreeMap<String, VolumeTag>) -> Result<(), ClientError> {
        let _: Admitted = self.send(
            Method::POST,
            "/session/admit",
            &AdmitRequest {
                session: *session,
                tags: presented.clone(),
            },
        )?;
        Ok(())
    }

    fn push_tag(&self, session: &SessionToken, volume: &str, tag: VolumeTag, event: TagEvent) -> Result<u64, ClientError> {
        let r: TagPushResponse = self.send(
            Method::POST,
            "/tags",
            &TagPushRequest {
                session: *session,
                volume: volume.into(),
                tag,
                event,
            },
        )?;
        Ok(r.sequence)
    }
}

/// Checks a running instance before trusting it: verifies its report or
/// CA-issued certificate and that the attested key is the one that
/// terminated the TLS connection.
pub fn attest_instance(addr: &str, key: &SigningKeyPair, trust: &ClientTrust) -> Result<InstanceVerdict, ClientError> {
    let (server_trust, seen) = ServerTrust::capture();
    let client = HttpsClient::for_key(addr, key, server_trust)?;
    let served = match trust {
        ClientTrust::CaRoot(_) => Served::Certificate(client.certificate()?),
        ClientTrust::Explicit { .. } => Served::Report(client.report()?),
    };
    let mut verdict = verify_instance(trust, &served, SystemTime::now());
    let tls_key = *seen.lock().expect("capture");
    if verdict.valid && verdict.instance_key != tls_key {
        verdict = InstanceVerdict {
            valid: false,
            reason: "attested key differs from the TLS server key".into(),
            instance_key: verdict.instance_key,
            mre: verdict.mre,
        };
    }
    Ok(verdict)
}

/// Opens application channels to a remote instance whose key is pinned.
#[derive(Debug, Clone)]
pub struct RemoteConnector {
    pub addr: String,
    pub server_key: PublicKey,
    pub rtt: Duration,
}

impl RemoteConnector {
    pub fn new(addr: impl Into<String>, server_key: PublicKey) -> Self {
        Self {
            addr: addr.into(),
            server_key,
            rtt: Duration::ZERO,
        }
    }

    /// Attests the instance first and pins the attested key.
    pub fn attested(addr: &str, trust: &ClientTrust) -> Result<Self, ClientError> {
        let probe = SigningKeyPair::generate(&OsEntropy);
        let verdict = attest_instance(addr, &probe, trust)?;
        match (verdict.valid, verdict.instance_key) {
            (true, Some(k)) => Ok(Self::new(addr, k)),
            _ => Err(ClientError::Transport(format!("instance attestation failed: {}", verdict.reason))),
        }
    }
}

impl Connector for RemoteConnector {
    fn connect(&self, channel: &SigningKeyPair) -> Result<Arc<dyn ServiceClient>, ClientError> {
        let c = HttpsClient::for_key(self.addr.clone(), channel, ServerTrust::Pinned(self.server_key))?.with_rtt(self.rtt);
        Ok(Arc::new(c))
    }
}
