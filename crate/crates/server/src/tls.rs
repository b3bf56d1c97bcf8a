//! Mutually authenticated TLS 1.3 with Ed25519 certificates.
//!
//! Peers are identified by their certificate's public key, not by a name
//! or a certificate chain. Servers accept any client presenting a valid
//! Ed25519 certificate and authorize on its key; clients pin the server
//! key, check a CA-issued instance certificate, or record the key for
//! later verification against the server's attestation report.

use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::server::danger::{ClientCertVerified, ClientCertVerifier};
use rustls::{ClientConfig, DigitallySignedStruct, DistinguishedName, ServerConfig, SignatureScheme};
use warden_core::attestation::ca::self_signed_certificate;
use warden_core::attestation::InstanceCertificate;
use warden_core::crypto::{EntropySource, PublicKey, Signature, SigningKeyPair};
use warden_core::tee::Measurement;
use x509_parser::prelude::{FromDer, X509Certificate};

const ED25519_OID: &str = "1.3.101.112";
/// Placeholder SNI; verification never looks at names.
pub const SERVER_NAME: &str = "warden.invalid";

#[derive(Debug, thiserror::Error)]
pub enum TlsError {
    #[error("certificate: {0}")]
    Certificate(String),
    #[error(transparent)]
    Rustls(#[from] rustls::Error),
}

/// Public key of an Ed25519 certificate.
pub fn certificate_key(der: &[u8]) -> Result<PublicKey, TlsError> {
    let (_, cert) = X509Certificate::from_der(der).map_err(|e| TlsError::Certificate(e.to_string()))?;
    let spki = &cert.tbs_certificate.subject_pki;
    if spki.algorithm.algorithm.to_id_string() != ED25519_OID {
        return Err(TlsError::Certificate("not an Ed25519 key".into()));
    }
    PublicKey::from_slice(&spki.subject_public_key.data).map_err(|e| TlsError::Certificate(e.to_string()))
}

/// Self-signed certificate for `key`; carries `mre` when given.
pub fn certificate_for(
    key: &SigningKeyPair,
    name: &str,
    mre: Option<&Measurement>,
    entropy: &dyn EntropySource,
) -> Result<Vec<u8>, TlsError> {
    match mre {
        Some(m) => self_signed_certificate(key, name, m, Duration::from_secs(24 * 3600), entropy)
            .map(|c| c.der)
            .map_err(|e| TlsError::Certificate(e.to_string())),
        None => {
            let kp = rcgen::KeyPair::try_from(key.to_pkcs8_der().as_slice())
                .map_err(|e| TlsError::Certificate(e.to_string()))?;
            let params = rcgen::CertificateParams::new(vec![name.to_string()])
                .map_err(|e| TlsError::Certificate(e.to_string()))?;
            params
                .self_signed(&kp)
                .map(|c| c.der().to_vec())
                .map_err(|e| TlsError::Certificate(e.to_string()))
        }
    }
}

fn verify_ed25519(message: &[u8], cert: &CertificateDer<'_>, dss: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
    if dss.scheme != SignatureScheme::ED25519 {
        return Err(rustls::Error::General("only Ed25519 handshake signatures are accepted".into()));
    }
    let key = certificate_key(cert).map_err(|e| rustls::Error::General(e.to_string()))?;
    let sig = Signature::from_slice(dss.signature()).map_err(|e| rustls::Error::General(e.to_string()))?;
    if key.verify(message, &sig) {
        Ok(HandshakeSignatureValid::assertion())
    } else {
        Err(rustls::Error::General("bad handshake signature".into()))
    }
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

/// Accepts any client with an Ed25519 certificate; authorization happens
/// on the key.
#[derive(Debug)]
struct AnyEd25519Client;

impl ClientCertVerifier for AnyEd25519Client {
    fn offer_client_auth(&self) -> bool {
        true
    }

    fn client_auth_mandatory(&self) -> bool {
        true
    }

    fn root_hint_subjects(&self) -> &[DistinguishedName] {
        &[]
    }

    fn verify_client_cert(&self, end_entity: &CertificateDer<'_>, _: &[CertificateDer<'_>], _: UnixTime) -> Result<ClientCertVerified, rustls::Error> {
        certificate_key(end_entity).map_err(|e| rustls::Error::General(e.to_string()))?;
        Ok(ClientCertVerified::assertion())
    }

    fn verify_tls12_signature(&self, _: &[u8], _: &CertificateDer<'_>, _: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
        Err(rustls::Error::General("TLS 1.2 is not supported".into()))
    }

    fn verify_tls13_signature(&self, message: &[u8], cert: &CertificateDer<'_>, dss: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_ed25519(message, cert, dss)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        vec![SignatureScheme::ED25519]
    }
}

/// How a client decides to trust a server.
#[derive(Debug, Clone)]
pub enum ServerTrust {
    /// The server's certificate key must equal this key.
    Pinned(PublicKey),
    /// The server must present an instance certificate valid under this CA root.
    CaRoot(PublicKey),
    /// Any Ed25519 server key; the key is recorded for later checks.
    Capture(Arc<Mutex<Option<PublicKey>>>),
}

impl ServerTrust {
    pub fn capture() -> (Self, Arc<Mutex<Option<PublicKey>>>) {
        let slot = Arc::new(Mutex::new(None));
        (ServerTrust::Capture(slot.clone()), slot)
    }
}

#[derive(Debug)]
struct TrustVerifier(ServerTrust);

impl ServerCertVerifier for TrustVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        _: &[CertificateDer<'_>],
        _: &ServerName<'_>,
        _: &[u8],
        _: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        let key = certificate_key(end_entity).map_err(|e| rustls::Error::General(e.to_string()))?;
        match &self.0 {
            ServerTrust::Pinned(expected) => {
                if key != *expected {
                    return Err(rustls::Error::General("server key does not match the pinned key".into()));
                }
            }
            ServerTrust::CaRoot(root) => {
                let cert = InstanceCertificate {
                    der: end_entity.as_ref().to_vec(),
                };
                cert.verify(root, SystemTime::now())
                    .map_err(|e| rustls::Error::General(format!("instance certificate: {e}")))?;
            }
            ServerTrust::Capture(slot) => *slot.lock().expect("capture") = Some(key),
        }
        Ok(ServerCertVerified::assertion())
    }

    fn verify_tls12_signature(&self, _: &[u8], _: &CertificateDer<'_>, _: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
        Err(rustls::Error::General("TLS 1.2 is not supported".into()))
    }

    fn verify_tls13_signature(&self, message: &[u8], cert: &CertificateDer<'_>, dss: &DigitallySignedStruct) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_ed25519(message, cert, dss)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        vec![SignatureScheme::ED25519]
    }
}

fn private_key(key: &SigningKeyPair) -> PrivateKeyDer<'static> {
    PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(key.to_pkcs8_der()))
}

/// TLS 1.3 server requiring a client certificate.
pub fn server_config(key: &SigningKeyPair, cert_der: Vec<u8>) -> Result<Arc<ServerConfig>, TlsError> {
    let cfg = ServerConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])?
        .with_client_cert_verifier(Arc::new(AnyEd25519Client))
        .with_single_cert(vec![CertificateDer::from(cert_der)], private_key(key))?;
    Ok(Arc::new(cfg))
}

/// TLS 1.3 client authenticating with `key`.
pub fn client_config(key: &SigningKeyPair, cert_der: Vec<u8>, trust: ServerTrust) -> Result<Arc<ClientConfig>, TlsError> {
    let cfg = ClientConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])?
        .dangerous()
        .with_custom_certificate_verifier(Arc::new(TrustVerifier(trust)))
        .with_client_auth_cert(vec![CertificateDer::from(cert_der)], private_key(key))?;
    Ok(Arc::new(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use warden_core::crypto::SeededEntropy;
    use warden_core::tee::measure;

    #[test]
    fn certificate_key_roundtrip() {
        let e = SeededEntropy::new(1);
        let k = SigningKeyPair::generate(&e);
        for mre in [None, Some(measure(b"x"))] {
            let der = certificate_for(&k, "t", mre.as_ref(), &e).unwrap();
            assert_eq!(certificate_key(&der).unwrap(), k.public_key());
        }
        assert!(certificate_key(b"junk").is_err());
    }

    #[test]
    fn configs_build() {
        let e = SeededEntropy::new(2);
        let k = SigningKeyPair::generate(&e);
        let der = certificate_for(&k, "t", None, &e).unwrap();
        server_config(&k, der.clone()).unwrap();
        client_config(&k, der, ServerTrust::Pinned(k.public_key())).unwrap();
    }
}
