mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use common::{daemon, World};
use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::pki_types::{CertificateDer, ServerName, UnixTime};
use rustls::{ClientConfig, DigitallySignedStruct, SignatureScheme};
use warden_core::approval::{ApprovalNonce, ApprovalRequest, StaticRule};
use warden_core::attestation::ClientTrust;
use warden_core::crypto::{hash, SigningKeyPair};
use warden_core::runtime::{demo, startup, RuntimeOptions};
use warden_core::service::{service_measurement, ChangeStatus};
use warden_core::tags::TagEvent;
use warden_core::tee::measure;
use warden_server::client::{attest_instance, HttpsClient, RemoteConnector};
use warden_server::tls::ServerTrust;

const CODE: &[u8] = b"e2e-app v1";

fn policy_yaml(board: &str) -> String {
    format!(
        "name: p\nservices:\n  - name: app\n    command: [\"run\", \"$$token$$\"]\n    mrenclaves: [\"{}\"]\n    strict: true\nvolumes:\n  - name: data\nsecrets:\n  - name: token\n    kind: explicit\n    value: s3cr3t\n{board}",
        measure(CODE)
    )
}

fn explicit_trust() -> ClientTrust {
    ClientTrust::Explicit {
        quoting_authority: SigningKeyPair::from_secret_bytes([9; 32]).public_key(),
        permitted: BTreeSet::from([service_measurement()]),
    }
}

#[test]
fn lifecycle_over_mutual_tls() {
    let w = World::new(1);
    let d = daemon("alice", StaticRule::ApproveAll, &w.entropy);
    let owner = SigningKeyPair::generate(w.entropy.as_ref());
    let trust = ClientTrust::Explicit {
        quoting_authority: w.qa.public_key(),
        permitted: BTreeSet::from([service_measurement()]),
    };
    let conn = RemoteConnector::attested(&w.addr(), &trust).unwrap();
    assert_eq!(conn.server_key, w.service.identity().public_key());

    let api = HttpsClient::for_key(w.addr(), &owner, ServerTrust::Pinned(conn.server_key)).unwrap();
    assert!(api.health().unwrap().running);
    let board = format!("board:\n  threshold: 1\n  members:\n{}", d.member_yaml("alice", false));
    let change = api.create_policy("p", &policy_yaml(&board)).unwrap();
    let settled = api.change(&change.id, Some(Duration::from_secs(10))).unwrap();
    assert_eq!(settled.status, ChangeStatus::Applied, "{settled:?}");

    let dir = tempfile::tempdir().unwrap();
    let opts = RuntimeOptions {
        policy: "p".into(),
        service: "app".into(),
        code: CODE.to_vec(),
        volume_dirs: [("data".to_string(), dir.path().join("data"))].into(),
    };
    let ctx = startup(&opts, w.platform.id(), &w.qa, &conn, w.entropy.as_ref()).unwrap();
    assert_eq!(ctx.argv(), ["run", "s3cr3t"]);
    assert_eq!(demo::counter_app(ctx, "/data/n", 3).unwrap(), 3);

    let tags = api.policy_tags("p").unwrap();
    assert_eq!(tags.len(), 1);
    assert_eq!(tags[0].last_event, TagEvent::Exit);

    let ctx = startup(&opts, w.platform.id(), &w.qa, &conn, w.entropy.as_ref()).unwrap();
    assert_eq!(demo::counter_app(ctx, "/data/n", 1).unwrap(), 4);

    let foreign = HttpsClient::for_key(w.addr(), &SigningKeyPair::generate(w.entropy.as_ref()), ServerTrust::Pinned(conn.server_key)).unwrap();
    let err = foreign.get_policy("p").unwrap_err();
    assert_eq!(err.code(), Some("not-found"));
    assert_eq!(foreign.get_policy("absent").unwrap_err().code(), Some("not-found"));

    let read = api.request_secrets("p").unwrap();
    api.change(&read.id, Some(Duration::from_secs(10))).unwrap();
    let released = api.released_secrets(&read.id).unwrap();
    assert_eq!(released.secrets["token"], "s3cr3t");
}

#[test]
fn report_endpoint_verifies_under_quoting_authority() {
    let w = World::new(2);
    let key = SigningKeyPair::generate(w.entropy.as_ref());
    let c = HttpsClient::for_key(w.addr(), &key, ServerTrust::Pinned(w.service.identity().public_key())).unwrap();
    let r = c.report().unwrap();
    assert!(r.verify(&w.qa.public_key()));
    assert_eq!(r.bound_pubkey, w.service.identity().public_key());
}

#[test]
fn instance_attestation_rejects_wrong_measurement_and_authority() {
    let w = World::new(3);
    let key = SigningKeyPair::generate(w.entropy.as_ref());
    let wrong_mre = ClientTrust::Explicit {
        quoting_authority: w.qa.public_key(),
        permitted: BTreeSet::from([measure(b"tampered")]),
    };
    assert!(!attest_instance(&w.addr(), &key, &wrong_mre).unwrap().valid);
    assert!(!attest_instance(&w.addr(), &key, &explicit_trust()).unwrap().valid);
}

#[test]
fn pinned_key_mismatch_fails_handshake() {
    let w = World::new(4);
    let key = SigningKeyPair::generate(w.entropy.as_ref());
    let c = HttpsClient::for_key(w.addr(), &key, ServerTrust::Pinned(key.public_key())).unwrap();
    assert!(matches!(c.health(), Err(warden_core::runtime::ClientError::Transport(_))));
}

#[derive(Debug)]
struct AcceptAny;

impl ServerCertVerifier for AcceptAny {
    fn verify_server_cert(&self, _: &CertificateDer<'_>, _: &[CertificateDer<'_>], _: &ServerName<'_>, _: &[u8], _: UnixTime) -> Result<ServerCertVerified, rustls::Error> {
        Ok(ServerCertVerified::assertion())
    }
    fn verify_tls12_signature(&self, _: &[u8], _: &CertificateDer<'_>, _: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
        Ok(HandshakeSignatureValid::assertion())
    }
    fn verify_tls13_signature(&self, _: &[u8], _: &CertificateDer<'_>, _: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
        Ok(HandshakeSignatureValid::assertion())
    }
    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        vec![SignatureScheme::ED25519]
    }
}

#[test]
fn client_without_certificate_is_refused() {
    let w = World::new(5);
    let cfg = ClientConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
        .with_protocol_versions(&[&rustls::version::TLS13])
        .unwrap()
        .dangerous()
        .with_custom_certificate_verifier(Arc::new(AcceptAny))
        .with_no_client_auth();
    let c = HttpsClient::new(w.addr(), Arc::new(cfg)).unwrap();
    assert!(matches!(c.health(), Err(warden_core::runtime::ClientError::Transport(_))));
}

#[test]
fn approval_daemon_signs_and_refuses_replay() {
    let w = World::new(6);
    let d = daemon("bob", StaticRule::RejectAll, &w.entropy);
    let me = SigningKeyPair::generate(w.entropy.as_ref());
    let c = HttpsClient::for_key(d.handle.addr().to_string(), &me, ServerTrust::Pinned(d.key.public_key())).unwrap();
    let req = ApprovalRequest {
        policy: "p".into(),
        change_digest: hash(b"change"),
        nonce: ApprovalNonce::random(w.entropy.as_ref()),
        summary: String::new(),
    };
    let vote: warden_core::approval::SignedVote = c.send(hyper::Method::POST, "/approve", &req).unwrap();
    assert!(vote.verify(&d.key.public_key(), &req));
    assert_eq!(vote.verdict, warden_core::policy::Vote::Reject);
    let replay = c.send::<_, warden_core::approval::SignedVote>(hyper::Method::POST, "/approve", &req);
    assert_eq!(replay.unwrap_err().code(), Some("replay"));
}

#[test]
fn rejecting_board_blocks_creation() {
    let w = World::new(7);
    let d = daemon("carol", StaticRule::RejectAll, &w.entropy);
    let owner = SigningKeyPair::generate(w.entropy.as_ref());
    let api = HttpsClient::for_key(w.addr(), &owner, ServerTrust::Pinned(w.service.identity().public_key())).unwrap();
    let board = format!("board:\n  threshold: 1\n  members:\n{}", d.member_yaml("carol", false));
    let change = api.create_policy("p", &policy_yaml(&board)).unwrap();
    let settled = api.change(&change.id, Some(Duration::from_secs(10))).unwrap();
    assert_eq!(settled.status, ChangeStatus::Rejected);
    assert_eq!(api.get_policy("p").unwrap_err().code(), Some("not-found"));
}

#[test]
fn ca_issued_certificate_is_presented_and_verified() {
    use warden_core::attestation::{CaState, DEFAULT_CERT_VALIDITY};
    let w = World::new(8);
    let ca = CaState::new(
        SigningKeyPair::generate(w.entropy.as_ref()),
        BTreeSet::from([service_measurement()]),
        DEFAULT_CERT_VALIDITY,
        w.qa.public_key(),
    );
    let cert = ca
        .attest_and_issue(&w.service.report(), std::time::SystemTime::now(), w.entropy.as_ref())
        .unwrap();
    w.service.install_certificate(cert);
    let server = warden_server::api::serve_service(common::listener(), w.service.clone(), 1).unwrap();
    let addr = server.addr().to_string();
    let key = SigningKeyPair::generate(w.entropy.as_ref());

    let ok = HttpsClient::for_key(addr.clone(), &key, ServerTrust::CaRoot(ca.root_public_key())).unwrap();
    assert!(ok.health().unwrap().running);
    let verdict = attest_instance(&addr, &key, &ClientTrust::CaRoot(ca.root_public_key())).unwrap();
    assert!(verdict.valid, "{}", verdict.reason);

    let other_root = SigningKeyPair::generate(w.entropy.as_ref()).public_key();
    let bad = HttpsClient::for_key(addr.clone(), &key, ServerTrust::CaRoot(other_root)).unwrap();
    assert!(bad.health().is_err());
    assert!(!attest_instance(&addr, &key, &ClientTrust::CaRoot(other_root)).unwrap().valid);
}
