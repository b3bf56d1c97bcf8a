//! Certificate authority that attests service instances and issues
//! short-lived X.509 certificates for the ones running permitted code.
//!
//! Instance certificates are Ed25519-signed X.509 v3 certificates whose
//! subject key is the instance's report-bound key. The measurement is
//! carried in a non-critical extension with OID [`MRE_EXTENSION_OID`]
//! whose value is `OCTET STRING (32 bytes)`.

use std::collections::BTreeSet;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rcgen::{
    CertificateParams, CustomExtension, DistinguishedName, DnType, IsCa, KeyPair, PublicKeyData, SerialNumber,
    SignatureAlgorithm, PKCS_ED25519,
};
use serde::{Deserialize, Serialize};
use time::OffsetDateTime;
use x509_parser::prelude::{FromDer, X509Certificate};

use crate::crypto::{self, EntropySource, PublicKey, Signature, SigningKeyPair};
use crate::tee::{measure, AttestationReport, Measurement};

pub const MRE_EXTENSION_OID: &[u64] = &[1, 3, 6, 1, 4, 1, 55738, 1, 1];
pub const MRE_EXTENSION_OID_STR: &str = "1.3.6.1.4.1.55738.1.1";
const ED25519_OID_STR: &str = "1.3.101.112";
pub const DEFAULT_CERT_VALIDITY: Duration = Duration::from_secs(24 * 3600);

/// The CA's code bundle; its measurement also covers the permitted set.
pub const CA_CODE: &[u8] = b"warden-ca/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CaError {
    #[error("report signature invalid")]
    InvalidReport,
    #[error("measurement {0} is not permitted by this CA")]
    MreNotPermitted(Measurement),
    #[error("certificate encoding: {0}")]
    Encoding(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CertError {
    #[error("malformed certificate: {0}")]
    Malformed(String),
    #[error("certificate signature does not verify under the trusted root")]
    BadSignature,
    #[error("certificate expired")]
    Expired,
    #[error("certificate not yet valid")]
    NotYetValid,
    #[error("certificate carries no measurement extension")]
    MissingMeasurement,
}

/// Fields of a verified instance certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertInfo {
    pub subject_pubkey: PublicKey,
    pub mre: Measurement,
    pub not_before: u64,
    pub not_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceCertificate {
    #[serde(with = "crate::b64")]
    pub der: Vec<u8>,
}

fn unix(t: SystemTime) -> i64 {
    match t.duration_since(UNIX_EPOCH) {
        Ok(d) => d.as_secs() as i64,
        Err(e) => -(e.duration().as_secs() as i64),
    }
}

impl InstanceCertificate {
    /// Parses without checking the signature or validity window.
    pub fn inspect(&self) -> Result<(CertInfo, Vec<u8>, Signature), CertError> {
        let (rest, cert) = X509Certificate::from_der(&self.der).map_err(|e| CertError::Malformed(e.to_string()))?;
        if !rest.is_empty() {
            return Err(CertError::Malformed("trailing bytes".into()));
        }
        if cert.signature_algorithm.algorithm.to_id_string() != ED25519_OID_STR {
            return Err(CertError::Malformed("signature algorithm is not Ed25519".into()));
        }
        let spki = cert.public_key();
        if spki.algorithm.algorithm.to_id_string() != ED25519_OID_STR {
            return Err(CertError::Malformed("subject key is not Ed25519".into()));
        }
        let subject_pubkey =
            PublicKey::from_slice(&spki.subject_public_key.data).map_err(|e| CertError::Malformed(e.to_string()))?;
        let ext = cert
            .extensions()
            .iter()
            .find(|e| e.oid.to_id_string() == MRE_EXTENSION_OID_STR)
            .ok_or(CertError::MissingMeasurement)?;
        let v = ext.value;
        if v.len() != 34 || v[0] != 0x04 || v[1] != 0x20 {
            return Err(CertError::Malformed("measurement extension".into()));
        }
        let mre = Measurement(crypto::Digest(v[2..].try_into().expect("32 bytes")));
        let sig = Signature::from_slice(&cert.signature_value.data).map_err(|_| CertError::BadSignature)?;
        let info = CertInfo {
            subject_pubkey,
            mre,
            not_before: cert.validity().not_before.timestamp().max(0) as u64,
            not_after: cert.validity().not_after.timestamp().max(0) as u64,
        };
        Ok((info, cert.tbs_certificate.as_ref().to_vec(), sig))
    }

    /// Checks the CA signature and the validity window at `now`.
    pub fn verify(&self, ca_root: &PublicKey, now: SystemTime) -> Result<CertInfo, CertError> {
        let (info, tbs, sig) = self.inspect()?;
        if !ca_root.verify(&tbs, &sig) {
            return Err(CertError::BadSignature);
        }
        let t = unix(now);
        if t < info.not_before as i64 {
            return Err(CertError::NotYetValid);
        }
        if t > info.not_after as i64 {
            return Err(CertError::Expired);
        }
        Ok(info)
    }
}

struct RawEd25519<'a>(&'a [u8; 32]);

impl PublicKeyData for RawEd25519<'_> {
    fn der_bytes(&self) -> &[u8] {
        self.0
    }

    fn algorithm(&self) -> &SignatureAlgorithm {
        &PKCS_ED25519
    }
}

fn offset(t: SystemTime) -> Result<OffsetDateTime, CaError> {
    OffsetDateTime::from_unix_timestamp(unix(t)).map_err(|e| CaError::Encoding(e.to_string()))
}

fn dn(common_name: &str) -> DistinguishedName {
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, common_name);
    dn
}

/// Issues a certificate for `subject`, signed by `issuer_key`.
pub fn issue_certificate(
    issuer_key: &SigningKeyPair,
    issuer_name: &str,
    subject: &PublicKey,
    subject_name: &str,
    mre: &Measurement,
    not_before: SystemTime,
    not_after: SystemTime,
    serial: [u8; 16],
) -> Result<InstanceCertificate, CaError> {
    let enc = |e: rcgen::Error| CaError::Encoding(e.to_string());
    let ca_key = KeyPair::try_from(issuer_key.to_pkcs8_der().as_slice()).map_err(enc)?;
    let mut ca_params = CertificateParams::default();
    ca_params.distinguished_name = dn(issuer_name);
    ca_params.is_ca = IsCa::Ca(rcgen::BasicConstraints::Unconstrained);
    let ca_cert = ca_params.self_signed(&ca_key).map_err(enc)?;

    let mut params = CertificateParams::new(vec![subject_name.to_string()]).map_err(enc)?;
    params.distinguished_name = dn(subject_name);
    params.not_before = offset(not_before)?;
    params.not_after = offset(not_after)?;
    params.serial_number = Some(SerialNumber::from_slice(&serial));
    let mut ext = vec![0x04, 0x20];
    ext.extend_from_slice(mre.as_bytes());
    params
        .custom_extensions
        .push(CustomExtension::from_oid_content(MRE_EXTENSION_OID, ext));
    let cert = params
        .signed_by(&RawEd25519(&subject.0), &ca_cert, &ca_key)
        .map_err(enc)?;
    Ok(InstanceCertificate {
        der: cert.der().to_vec(),
    })
}

/// Self-signed certificate binding `key` to `mre`, used when no CA is
/// involved and clients attest explicitly.
pub fn self_signed_certificate(
    key: &SigningKeyPair,
    name: &str,
    mre: &Measurement,
    validity: Duration,
    entropy: &dyn EntropySource,
) -> Result<InstanceCertificate, CaError> {
    let now = SystemTime::now();
    issue_certificate(
        key,
        name,
        &key.public_key(),
        name,
        mre,
        now - Duration::from_secs(60),
        now + validity,
        crypto::random_array(entropy),
    )
}

/// CA state. The permitted measurement set is fixed at construction and
/// folded into the CA's own measurement.
pub struct CaState {
    root: SigningKeyPair,
    permitted: BTreeSet<Measurement>,
    validity: Duration,
    quoting_authority: PublicKey,
}

impl std::fmt::Debug for CaState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CaState")
            .field("root", &self.root.public_key())
            .field("permitted", &self.permitted)
            .field("validity", &self.validity)
            .finish_non_exhaustive()
    }
}

impl CaState {
    pub fn new(
        root: SigningKeyPair,
        permitted: BTreeSet<Measurement>,
        validity: Duration,
        quoting_authority: PublicKey,
    ) -> Self {
        Self {
            root,
            permitted,
            validity,
            quoting_authority,
        }
    }

    pub fn root_public_key(&self) -> PublicKey {
        self.root.public_key()
    }

    pub fn permitted(&self) -> &BTreeSet<Measurement> {
        &self.permitted
    }

    pub fn validity(&self) -> Duration {
        self.validity
    }

    /// measure(CA code ‖ permitted measurements in order ‖ validity secs).
    pub fn measurement(&self) -> Measurement {
        let mut blob = CA_CODE.to_vec();
        for m in &self.permitted {
            blob.extend_from_slice(m.as_bytes());
        }
        blob.extend_from_slice(&self.validity.as_secs().to_be_bytes());
        measure(&blob)
    }

    pub fn attest_and_issue(
        &self,
        report: &AttestationReport,
        now: SystemTime,
        entropy: &dyn EntropySource,
    ) -> Result<InstanceCertificate, CaError> {
        if !report.verify(&self.quoting_authority) {
            return Err(CaError::InvalidReport);
        }
        if !self.permitted.contains(&report.mre) {
            return Err(CaError::MreNotPermitted(report.mre));
        }
        issue_certificate(
            &self.root,
            "warden-ca",
            &report.bound_pubkey,
            "warden-instance",
            &report.mre,
            now,
            now + self.validity,
            crypto::random_array(entropy),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{SeededEntropy, SharedEntropy};
    use crate::tee::{PlatformId, QuotingAuthority};
    use std::sync::Arc;

    struct Setup {
        qa: QuotingAuthority,
        platform: PlatformId,
        ca: CaState,
        entropy: SharedEntropy,
        good: Measurement,
    }

    fn setup() -> Setup {
        let entropy: SharedEntropy = Arc::new(SeededEntropy::new(21));
        let qa = QuotingAuthority::generate(entropy.clone());
        let platform = PlatformId::random(entropy.as_ref());
        qa.register_platform(platform);
        let good = measure(b"service v2");
        let ca = CaState::new(
            SigningKeyPair::generate(entropy.as_ref()),
            [good].into(),
            DEFAULT_CERT_VALIDITY,
            qa.public_key(),
        );
        Setup {
            qa,
            platform,
            ca,
            entropy,
            good,
        }
    }

    #[test]
    fn permitted_instance_gets_verifiable_certificate() {
        let s = setup();
        let key = SigningKeyPair::generate(s.entropy.as_ref()).public_key();
        let report = s.qa.issue_report(s.platform, s.good, key).unwrap();
        let now = SystemTime::now();
        let cert = s.ca.attest_and_issue(&report, now, s.entropy.as_ref()).unwrap();
        let info = cert.verify(&s.ca.root_public_key(), now).unwrap();
        assert_eq!(info.subject_pubkey, key);
        assert_eq!(info.mre, s.good);
        assert!(info.not_after - info.not_before <= DEFAULT_CERT_VALIDITY.as_secs());
    }

    #[test]
    fn retired_mre_refused() {
        let s = setup();
        let key = SigningKeyPair::generate(s.entropy.as_ref()).public_key();
        let report = s.qa.issue_report(s.platform, measure(b"service v1"), key).unwrap();
        assert!(matches!(
            s.ca.attest_and_issue(&report, SystemTime::now(), s.entropy.as_ref()),
            Err(CaError::MreNotPermitted(_))
        ));
    }

    #[test]
    fn expired_and_foreign_certificates_rejected() {
        let s = setup();
        let key = SigningKeyPair::generate(s.entropy.as_ref()).public_key();
        let report = s.qa.issue_report(s.platform, s.good, key).unwrap();
        let now = SystemTime::now();
        let cert = s.ca.attest_and_issue(&report, now, s.entropy.as_ref()).unwrap();
        let later = now + DEFAULT_CERT_VALIDITY + Duration::from_secs(2);
        assert_eq!(cert.verify(&s.ca.root_public_key(), later), Err(CertError::Expired));
        let other_root = SigningKeyPair::generate(s.entropy.as_ref()).public_key();
        assert_eq!(cert.verify(&other_root, now), Err(CertError::BadSignature));
    }

    #[test]
    fn forged_report_refused() {
        let s = setup();
        let key = SigningKeyPair::generate(s.entropy.as_ref()).public_key();
        let mut report = s.qa.issue_report(s.platform, measure(b"evil"), key).unwrap();
        report.mre = s.good;
        assert_eq!(
            s.ca.attest_and_issue(&report, SystemTime::now(), s.entropy.as_ref()),
            Err(CaError::InvalidReport)
        );
    }

    #[test]
    fn ca_measurement_covers_permitted_set() {
        let s = setup();
        let other = CaState::new(
            SigningKeyPair::generate(s.entropy.as_ref()),
            [s.good, measure(b"extra")].into(),
            DEFAULT_CERT_VALIDITY,
            s.qa.public_key(),
        );
        assert_ne!(s.ca.measurement(), other.measurement());
    }

    #[test]
    fn self_signed_binds_key_and_mre() {
        let e = SeededEntropy::new(4);
        let key = SigningKeyPair::generate(&e);
        let mre = measure(b"svc");
        let cert = self_signed_certificate(&key, "svc", &mre, DEFAULT_CERT_VALIDITY, &e).unwrap();
        let info = cert.verify(&key.public_key(), SystemTime::now()).unwrap();
        assert_eq!(info.mre, mre);
        assert_eq!(info.subject_pubkey, key.public_key());
    }
}
