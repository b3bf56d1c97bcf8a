//! Network side of board approval: the member daemon serving
//! `POST /approve` and the transport the service uses to reach it.

use std::collections::HashMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use hyper::Method;
use serde::{Deserialize, Serialize};
use warden_core::approval::{ApprovalError, ApprovalRequest, ApprovalService, ApprovalTransport, DecisionRule, InteractiveRule, SignedVote, StaticRule};
use warden_core::crypto::{EntropySource, SigningKeyPair};
use warden_core::policy::BoardMember;
use warden_core::runtime::Refusal;

use crate::client::HttpsClient;
use crate::serve::{spawn, ServerHandle};
use crate::tls::{certificate_for, server_config, ServerTrust};

pub const APPROVE_PATH: &str = "/approve";

/// Decision rule named in a daemon configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RuleSpec {
    Static(StaticRule),
    Interactive { interactive: bool },
}

impl RuleSpec {
    pub fn build(&self) -> Box<dyn DecisionRule> {
        match self {
            RuleSpec::Static(r) => Box::new(r.clone()),
            RuleSpec::Interactive { .. } => Box::new(InteractiveRule::new(std::io::BufReader::new(std::io::stdin()), std::io::stderr())),
        }
    }
}

/// Daemon configuration file (YAML or JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DaemonConfig {
    pub member: String,
    /// File holding the member's 32-byte Ed25519 secret, hex-encoded.
    pub key: PathBuf,
    pub rule: RuleSpec,
    #[serde(default = "default_listen")]
    pub listen: String,
}

fn default_listen() -> String {
    "127.0.0.1:8443".into()
}

impl DaemonConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: DaemonConfig = serde_yaml::from_str(&text)?;
        if cfg.key.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.key = dir.join(&cfg.key);
            }
        }
        Ok(cfg)
    }
}

/// Reads a hex-encoded Ed25519 secret key.
pub fn load_key(path: &Path) -> anyhow::Result<SigningKeyPair> {
    let raw = hex::decode(std::fs::read_to_string(path)?.trim())?;
    Ok(SigningKeyPair::from_secret_slice(&raw)?)
}

pub fn save_key(path: &Path, key: &SigningKeyPair) -> std::io::Result<()> {
    std::fs::write(path, hex::encode(key.secret_bytes()))
}

pub fn router(service: Arc<ApprovalService>) -> Router {
    Router::new().route(APPROVE_PATH, post(approve)).with_state(service)
}

async fn approve(State(s): State<Arc<ApprovalService>>, Json(req): Json<ApprovalRequest>) -> Response {
    let result = tokio::task::spawn_blocking(move || s.handle_approval(&req)).await;
    match result {
        Ok(Ok(vote)) => Json(vote).into_response(),
        Ok(Err(e)) => {
            let code = match e {
                ApprovalError::Replay => "replay",
                ApprovalError::Malformed(_) => "malformed",
            };
            let refusal = Refusal {
                code: code.into(),
                message: e.to_string(),
                status: 400,
            };
            (StatusCode::BAD_REQUEST, Json(refusal)).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// Serves one member's approval endpoint; the TLS key is the member key,
/// so the service can pin the key listed in the board.
pub fn serve_daemon(
    listener: TcpListener,
    service: Arc<ApprovalService>,
    key: &SigningKeyPair,
    entropy: &dyn EntropySource,
    workers: usize,
) -> anyhow::Result<ServerHandle> {
    let cert = certificate_for(key, "warden-approver", None, entropy)?;
    let tls = server_config(key, cert)?;
    Ok(spawn(listener, tls, router(service), workers)?)
}

/// Splits an approval URL into `host:port` and path. Accepts an optional
/// `https://` scheme; the path defaults to `/approve`.
pub fn split_url(url: &str) -> (String, String) {
    let rest = url
        .strip_prefix("https://")
        .or_else(|| url.strip_prefix("http://"))
        .unwrap_or(url);
    match rest.find('/') {
        Some(i) => (rest[..i].to_string(), rest[i..].to_string()),
        None => (rest.to_string(), APPROVE_PATH.to_string()),
    }
}

/// Reaches members over mutual TLS, pinning each member's listed key.
pub struct HttpApprovers {
    key: SigningKeyPair,
    clients: Mutex<HashMap<String, Arc<HttpsClient>>>,
    rtt: Duration,
}

impl HttpApprovers {
    /// `key` authenticates the service to the daemons.
    pub fn new(key: SigningKeyPair) -> Self {
        Self {
            key,
            clients: Mutex::new(HashMap::new()),
            rtt: Duration::ZERO,
        }
    }

    pub fn with_rtt(mut self, rtt: Duration) -> Self {
        self.rtt = rtt;
        self
    }

    fn client(&self, member: &BoardMember, addr: &str) -> Result<Arc<HttpsClient>, String> {
        let cache_key = format!("{addr}#{}", member.certificate);
        let mut clients = self.clients.lock().expect("clients");
        if let Some(c) = clients.get(&cache_key) {
            return Ok(c.clone());
        }
        let c = Arc::new(
            HttpsClient::for_key(addr, &self.key, ServerTrust::Pinned(member.certificate))
                .map_err(|e| e.to_string())?
                .with_rtt(self.rtt),
        );
        clients.insert(cache_key, c.clone());
        Ok(c)
    }
}

impl ApprovalTransport for HttpApprovers {
    fn request_vote(&self, member: &BoardMember, req: &ApprovalRequest) -> Result<SignedVote, String> {
        let (addr, path) = split_url(&member.url);
        self.client(member, &addr)?
            .send(Method::POST, &path, req)
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_forms() {
        assert_eq!(split_url("https://h:1/a/b"), ("h:1".into(), "/a/b".into()));
        assert_eq!(split_url("h:2"), ("h:2".into(), "/approve".into()));
        assert_eq!(split_url("http://h:3/"), ("h:3".into(), "/".into()));
    }

    #[test]
    fn rule_spec_forms() {
        let r: RuleSpec = serde_yaml::from_str("rule: approve-all").unwrap();
        assert_eq!(r, RuleSpec::Static(StaticRule::ApproveAll));
        let r: RuleSpec = serde_yaml::from_str("interactive: true").unwrap();
        assert!(matches!(r, RuleSpec::Interactive { .. }));
    }
}
