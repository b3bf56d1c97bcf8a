//! Application attestation checks, the configuration handed to attested
//! sessions, and client-side verification of service instances.

pub mod ca;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, hex_newtype_serde, EntropySource, KeyMaterial, PublicKey, SigningKeyPair};
use crate::fs_shield::VolumeTag;
use crate::policy::{PolicyDocument, ServiceSpec};
use crate::tee::{AttestationReport, Measurement, PlatformId, QuotingAuthority, TeeError};

pub use ca::{CaError, CaState, CertError, CertInfo, InstanceCertificate, DEFAULT_CERT_VALIDITY};

/// The four report checks, each with its own refusal code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, thiserror::Error)]
pub enum CheckFailure {
    #[error("report signature does not verify")]
    BadSignature,
    #[error("channel key does not match the key bound in the report")]
    PubkeyMismatch,
    #[error("unknown policy or service")]
    UnknownPolicy,
    #[error("measurement not permitted by the policy")]
    MreRejected,
    #[error("platform not permitted by the policy")]
    PlatformRejected,
}

impl CheckFailure {
    pub fn code(&self) -> &'static str {
        match self {
            CheckFailure::BadSignature => "bad-signature",
            CheckFailure::PubkeyMismatch => "pubkey-mismatch",
            CheckFailure::UnknownPolicy => "unknown-policy",
            CheckFailure::MreRejected => "mre-rejected",
            CheckFailure::PlatformRejected => "platform-rejected",
        }
    }
}

/// Verifies a session report against the channel key and the policy and
/// returns the matching service.
pub fn check_session_report<'a>(
    report: &AttestationReport,
    quoting_authority: &PublicKey,
    channel_key: &PublicKey,
    policy: Option<&'a PolicyDocument>,
    service: &str,
) -> Result<&'a ServiceSpec, CheckFailure> {
    if !report.verify(quoting_authority) {
        return Err(CheckFailure::BadSignature);
    }
    if report.bound_pubkey != *channel_key {
        return Err(CheckFailure::PubkeyMismatch);
    }
    let svc = policy
        .and_then(|p| p.service(service))
        .ok_or(CheckFailure::UnknownPolicy)?;
    if !svc.mrenclaves_resolved().any(|m| *m == report.mre) {
        return Err(CheckFailure::MreRejected);
    }
    if !svc.platform_permitted(&report.platform) {
        return Err(CheckFailure::PlatformRejected);
    }
    Ok(svc)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionToken(pub [u8; 16]);

hex_newtype_serde!(SessionToken, 16);

impl fmt::Debug for SessionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionToken({})", &self.to_string()[..8])
    }
}

impl SessionToken {
    pub fn random(entropy: &dyn EntropySource) -> Self {
        Self(crypto::random_array(entropy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    /// The image's root file system; read-only, tags fixed by policy.
    Root,
    /// A volume of the session's own policy; tracked by pushed tags.
    Data,
    /// A volume exported by another policy; read-only.
    Imported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeGrant {
    pub name: String,
    pub mount: String,
    pub kind: VolumeKind,
    pub key: KeyMaterial,
    /// The session is admitted only if the volume's tag is one of these.
    pub expected_tags: Vec<VolumeTag>,
    pub writable: bool,
}

/// Everything an attested service needs to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session: SessionToken,
    pub policy: String,
    pub service: String,
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pwd: Option<String>,
    pub secrets: BTreeMap<String, String>,
    pub volumes: Vec<VolumeGrant>,
    /// Files in the root volume whose `$$name$$` references are resolved in memory.
    pub injection_files: Vec<String>,
    pub strict: bool,
}

/// Binds the instance identity key to the service's own measurement.
pub fn instance_self_attest(
    identity: &SigningKeyPair,
    platform: PlatformId,
    mre: Measurement,
    qa: &QuotingAuthority,
) -> Result<AttestationReport, TeeError> {
    qa.issue_report(platform, mre, identity.public_key())
}

/// What a client trusts when connecting to a service instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientTrust {
    CaRoot(PublicKey),
    Explicit {
        quoting_authority: PublicKey,
        permitted: BTreeSet<Measurement>,
    },
}

/// Evidence presented by a service instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Served {
    Certificate(InstanceCertificate),
    Report(AttestationReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceVerdict {
    pub valid: bool,
    pub reason: String,
    pub instance_key: Option<PublicKey>,
    pub mre: Option<Measurement>,
}

impl InstanceVerdict {
    fn reject(reason: impl Into<String>) -> Self {
        Self {
            valid: false,
            reason: reason.into(),
            instance_key: None,
            mre: None,
        }
    }
}

pub fn verify_instance(trust: &ClientTrust, served: &Served, now: SystemTime) -> InstanceVerdict {
    match (trust, served) {
        (ClientTrust::CaRoot(root), Served::Certificate(cert)) => match cert.verify(root, now) {
            Ok(info) => InstanceVerdict {
                valid: true,
                reason: "certificate verifies under the CA root".into(),
                instance_key: Some(info.subject_pubkey),
                mre: Some(info.mre),
            },
            Err(e) => InstanceVerdict::reject(e.to_string()),
        },
        (
            ClientTrust::Explicit {
                quoting_authority,
                permitted,
            },
            Served::Report(report),
        ) => {
            if !report.verify(quoting_authority) {
                InstanceVerdict::reject("report signature does not verify")
            } else if !permitted.contains(&report.mre) {
                InstanceVerdict::reject(format!("measurement {} not in allow-list", report.mre))
            } else {
                InstanceVerdict {
                    valid: true,
                    reason: "report verifies and measurement is allowed".into(),
                    instance_key: Some(report.bound_pubkey),
                    mre: Some(report.mre),
                }
            }
        }
        (ClientTrust::CaRoot(_), Served::Report(_)) => InstanceVerdict::reject("CA trust requires a certificate"),
        (ClientTrust::Explicit { .. }, Served::Certificate(_)) => {
            InstanceVerdict::reject("explicit trust requires a report")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{SeededEntropy, SharedEntropy};
    use crate::policy::parse_policy;
    use crate::tee::measure;
    use std::sync::Arc;

    struct World {
        qa: QuotingAuthority,
        platform: PlatformId,
        entropy: SharedEntropy,
    }

    fn world() -> World {
        let entropy: SharedEntropy = Arc::new(SeededEntropy::new(77));
        let qa = QuotingAuthority::generate(entropy.clone());
        let platform = PlatformId::random(entropy.as_ref());
        qa.register_platform(platform);
        World { qa, platform, entropy }
    }

    fn policy(mre: Measurement, platform: PlatformId) -> PolicyDocument {
        parse_policy(&format!(
            "name: p\nservices:\n  - name: s\n    command: run\n    mrenclaves: [\"{mre}\"]\n    platforms: [\"{platform}\"]\n"
        ))
        .unwrap()
    }

    /// All 16 combinations of the four predicates: the service is returned
    /// only when every predicate holds.
    #[test]
    fn predicate_matrix() {
        let w = world();
        let good_mre = measure(b"app");
        let doc = policy(good_mre, w.platform);
        let other_platform = PlatformId::random(w.entropy.as_ref());
        w.qa.register_platform(other_platform);
        for bits in 0..16u8 {
            let (pk_ok, mre_ok, plat_ok, sig_ok) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0);
            let key = SigningKeyPair::generate(w.entropy.as_ref()).public_key();
            let channel = if pk_ok {
                key
            } else {
                SigningKeyPair::generate(w.entropy.as_ref()).public_key()
            };
            let mre = if mre_ok { good_mre } else { measure(b"other") };
            let platform = if plat_ok { w.platform } else { other_platform };
            let mut report = w.qa.issue_report(platform, mre, key).unwrap();
            if !sig_ok {
                report.signature.0[5] ^= 0x40;
            }
            let res = check_session_report(&report, &w.qa.public_key(), &channel, Some(&doc), "s");
            assert_eq!(res.is_ok(), bits == 15, "bits {bits:04b}: {res:?}");
        }
    }

    #[test]
    fn unknown_policy_and_service() {
        let w = world();
        let key = SigningKeyPair::generate(w.entropy.as_ref()).public_key();
        let report = w.qa.issue_report(w.platform, measure(b"app"), key).unwrap();
        let doc = policy(measure(b"app"), w.platform);
        assert_eq!(
            check_session_report(&report, &w.qa.public_key(), &key, None, "s").unwrap_err(),
            CheckFailure::UnknownPolicy
        );
        assert_eq!(
            check_session_report(&report, &w.qa.public_key(), &key, Some(&doc), "nope").unwrap_err(),
            CheckFailure::UnknownPolicy
        );
    }

    #[test]
    fn replay_with_other_channel_key_fails() {
        let w = world();
        let key = SigningKeyPair::generate(w.entropy.as_ref()).public_key();
        let report = w.qa.issue_report(w.platform, measure(b"app"), key).unwrap();
        let doc = policy(measure(b"app"), w.platform);
        for _ in 0..50 {
            let thief = SigningKeyPair::generate(w.entropy.as_ref()).public_key();
            assert_eq!(
                check_session_report(&report, &w.qa.public_key(), &thief, Some(&doc), "s").unwrap_err(),
                CheckFailure::PubkeyMismatch
            );
        }
    }

    #[test]
    fn self_attestation_and_explicit_verification() {
        let w = world();
        let identity = SigningKeyPair::generate(w.entropy.as_ref());
        let mre = measure(b"service");
        let report = instance_self_attest(&identity, w.platform, mre, &w.qa).unwrap();
        assert_eq!(report.bound_pubkey, identity.public_key());
        let trust = ClientTrust::Explicit {
            quoting_authority: w.qa.public_key(),
            permitted: [mre].into(),
        };
        let v = verify_instance(&trust, &Served::Report(report), SystemTime::now());
        assert!(v.valid, "{}", v.reason);
        let mut tampered = report;
        tampered.mre = measure(b"evil");
        assert!(!verify_instance(&trust, &Served::Report(tampered), SystemTime::now()).valid);
    }

    #[test]
    fn explicit_and_certificate_paths_agree() {
        let w = world();
        let good = measure(b"service");
        let ca = CaState::new(
            SigningKeyPair::generate(w.entropy.as_ref()),
            [good].into(),
            DEFAULT_CERT_VALIDITY,
            w.qa.public_key(),
        );
        let explicit = ClientTrust::Explicit {
            quoting_authority: w.qa.public_key(),
            permitted: [good].into(),
        };
        let via_ca = ClientTrust::CaRoot(ca.root_public_key());
        for code in [b"service".as_slice(), b"other"] {
            let id = SigningKeyPair::generate(w.entropy.as_ref());
            let report = instance_self_attest(&id, w.platform, measure(code), &w.qa).unwrap();
            let now = SystemTime::now();
            let e = verify_instance(&explicit, &Served::Report(report), now).valid;
            let c = match ca.attest_and_issue(&report, now, w.entropy.as_ref()) {
                Ok(cert) => verify_instance(&via_ca, &Served::Certificate(cert), now).valid,
                Err(_) => false,
            };
            assert_eq!(e, c);
        }
    }
}
