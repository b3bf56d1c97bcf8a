//! REST endpoints of the trust service.
//!
//! Every endpoint sees the caller's certificate key as [`Peer`]. Errors are
//! returned as a JSON [`Refusal`] with the service's status code.

use std::time::Duration;

use axum::extract::{Extension, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use warden_core::crypto::OsEntropy;
use warden_core::policy::parse_policy;
use warden_core::runtime::Refusal;
use warden_core::service::{ChangeId, ServiceError, TrustService};

use crate::serve::Peer;
use crate::wire::{AdmitRequest, Admitted, PolicyBody, SessionRequest, TagPushRequest, TagPushResponse};

/// Longest server-side wait a client may request on a change.
pub const MAX_WAIT: Duration = Duration::from_secs(60);

pub struct ApiError(Refusal);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(ApiError(Refusal {
            code: "internal".into(),
            message: e.to_string(),
            status: 500,
        })),
    }
}

fn parse_named(name: &str, body: &PolicyBody) -> Result<warden_core::policy::PolicyDocument, ServiceError> {
    let doc = parse_policy(&body.policy)?;
    if doc.name != name {
        return Err(ServiceError::Invalid(format!(
            "policy name {:?} does not match the path {name:?}",
            doc.name
        )));
    }
    Ok(doc)
}

pub fn router(service: TrustService) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/report", get(report))
        .route("/certificate", get(certificate))
        .route("/session", post(session))
        .route("/session/admit", post(admit))
        .route("/tags", post(push_tag))
        .route(
            "/policy/{name}",
            post(create_policy).get(get_policy).put(update_policy).delete(delete_policy),
        )
        .route("/policy/{name}/secrets", post(request_secrets))
        .route("/policy/{name}/tags", get(policy_tags))
        .route("/changes/{id}", get(change))
        .route("/changes/{id}/secrets", get(released_secrets))
        .with_state(service)
}

async fn health(State(s): State<TrustService>) -> Response {
    let h = s.health();
    let status = if h.running { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (status, Json(h)).into_response()
}

async fn report(State(s): State<TrustService>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/octet-stream")],
        s.report().to_bytes().to_vec(),
    )
        .into_response()
}

async fn certificate(State(s): State<TrustService>) -> Response {
    match s.certificate() {
        Some(c) => Json(c).into_response(),
        None => ApiError::from(ServiceError::NotFound).into_response(),
    }
}

async fn session(State(s): State<TrustService>, Extension(peer): Extension<Peer>, Json(req): Json<SessionRequest>) -> Response {
    blocking(move || s.attest_session(&req.report, &peer.0, &req.policy, &req.service))
        .await
        .into_response()
}

async fn admit(State(s): State<TrustService>, Json(req): Json<AdmitRequest>) -> ApiResult<Admitted> {
    blocking(move || s.admit(&req.session, &req.tags).map(|_| Admitted { admitted: true })).await
}

async fn push_tag(State(s): State<TrustService>, Json(req): Json<TagPushRequest>) -> ApiResult<TagPushResponse> {
    blocking(move || {
        s.push_tag(&req.session, &req.volume, req.tag, req.event)
            .map(|sequence| TagPushResponse { sequence })
    })
    .await
}

async fn create_policy(
    State(s): State<TrustService>,
    Extension(peer): Extension<Peer>,
    Path(name): Path<String>,
    Json(body): Json<PolicyBody>,
) -> Response {
    blocking(move || s.create_policy(&peer.0, parse_named(&name, &body)?))
        .await
        .map(|j| (StatusCode::ACCEPTED, j))
        .into_response()
}

async fn update_policy(
    State(s): State<TrustService>,
    Extension(peer): Extension<Peer>,
    Path(name): Path<String>,
    Json(body): Json<PolicyBody>,
) -> Response {
    blocking(move || s.update_policy(&peer.0, parse_named(&name, &body)?))
        .await
        .map(|j| (StatusCode::ACCEPTED, j))
        .into_response()
}

async fn delete_policy(State(s): State<TrustService>, Extension(peer): Extension<Peer>, Path(name): Path<String>) -> Response {
    blocking(move || s.delete_policy(&peer.0, &name))
        .await
        .map(|j| (StatusCode::ACCEPTED, j))
        .into_response()
}

async fn request_secrets(State(s): State<TrustService>, Extension(peer): Extension<Peer>, Path(name): Path<String>) -> Response {
    blocking(move || s.request_secrets(&peer.0, &name))
        .await
        .map(|j| (StatusCode::ACCEPTED, j))
        .into_response()
}

async fn get_policy(State(s): State<TrustService>, Extension(peer): Extension<Peer>, Path(name): Path<String>) -> Response {
    blocking(move || s.get_policy(&peer.0, &name)).await.into_response()
}

async fn policy_tags(State(s): State<TrustService>, Extension(peer): Extension<Peer>, Path(name): Path<String>) -> Response {
    blocking(move || s.policy_tags(&peer.0, &name)).await.into_response()
}

#[derive(Debug, Deserialize)]
struct WaitQuery {
    /// Milliseconds to wait for the change to leave `pending`.
    wait: Option<u64>,
}

fn change_id(raw: &str) -> Result<ChangeId, ServiceError> {
    raw.parse().map_err(|_| ServiceError::NotFound)
}

async fn change(
    State(s): State<TrustService>,
    Extension(peer): Extension<Peer>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> Response {
    blocking(move || {
        let id = change_id(&id)?;
        match q.wait {
            Some(ms) => s.wait_change(&peer.0, &id, Duration::from_millis(ms).min(MAX_WAIT)),
            None => s.change(&peer.0, &id),
        }
    })
    .await
    .into_response()
}

async fn released_secrets(State(s): State<TrustService>, Extension(peer): Extension<Peer>, Path(id): Path<String>) -> Response {
    blocking(move || s.released_secrets(&peer.0, &change_id(&id)?)).await.into_response()
}

/// Serves the API with the instance identity as TLS key. The instance's
/// CA-issued certificate is presented when installed, otherwise a
/// self-signed one carrying its measurement.
pub fn serve_service(
    listener: std::net::TcpListener,
    service: TrustService,
    workers: usize,
) -> anyhow::Result<crate::serve::ServerHandle> {
    let cert = match service.certificate() {
        Some(c) => c.der,
        None => crate::tls::certificate_for(service.identity(), "warden-instance", Some(&service.mre()), &OsEntropy)?,
    };
    let tls = crate::tls::server_config(service.identity(), cert)?;
    Ok(crate::serve::spawn(listener, tls, router(service), workers)?)
}
