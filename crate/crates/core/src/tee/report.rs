use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{Measurement, PlatformId, TeeError};
use crate::crypto::{
    self, hex_newtype_serde, Digest, PublicKey, SharedEntropy, Signature, SigningKeyPair,
};

pub const REPORT_VERSION: u8 = 1;

/// version:1 ‖ platform:16 ‖ mre:32 ‖ pubkey:32 ‖ nonce:16 ‖ sig:64
pub const REPORT_LEN: usize = 1 + 16 + 32 + 32 + 16 + 64;
const SIGNED_LEN: usize = REPORT_LEN - 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReportNonce(pub [u8; 16]);

hex_newtype_serde!(ReportNonce, 16);

impl fmt::Debug for ReportNonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReportNonce({self})")
    }
}

/// Binds an ephemeral public key to a measurement and a platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationReport {
    pub version: u8,
    pub platform: PlatformId,
    pub mre: Measurement,
    pub bound_pubkey: PublicKey,
    pub nonce: ReportNonce,
    pub signature: Signature,
}

impl AttestationReport {
    /// The byte string covered by the quoting authority's signature.
    pub fn signed_bytes(&self) -> [u8; SIGNED_LEN] {
        let mut out = [0u8; SIGNED_LEN];
        out[0] = self.version;
        out[1..17].copy_from_slice(&self.platform.0);
        out[17..49].copy_from_slice(self.mre.as_bytes());
        out[49..81].copy_from_slice(&self.bound_pubkey.0);
        out[81..97].copy_from_slice(&self.nonce.0);
        out
    }

    pub fn to_bytes(&self) -> [u8; REPORT_LEN] {
        let mut out = [0u8; REPORT_LEN];
        out[..SIGNED_LEN].copy_from_slice(&self.signed_bytes());
        out[SIGNED_LEN..].copy_from_slice(&self.signature.0);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, TeeError> {
        if raw.len() != REPORT_LEN {
            return Err(TeeError::MalformedReport(format!(
                "expected {REPORT_LEN} bytes, got {}",
                raw.len()
            )));
        }
        if raw[0] != REPORT_VERSION {
            return Err(TeeError::MalformedReport(format!("unsupported version {}", raw[0])));
        }
        let arr = |r: std::ops::Range<usize>| raw[r].to_vec();
        Ok(Self {
            version: raw[0],
            platform: PlatformId(arr(1..17).try_into().expect("16 bytes")),
            mre: Measurement(Digest(arr(17..49).try_into().expect("32 bytes"))),
            bound_pubkey: PublicKey(arr(49..81).try_into().expect("32 bytes")),
            nonce: ReportNonce(arr(81..97).try_into().expect("16 bytes")),
            signature: Signature(arr(97..161).try_into().expect("64 bytes")),
        })
    }

    pub fn verify(&self, authority: &PublicKey) -> bool {
        self.version == REPORT_VERSION && authority.verify(&self.signed_bytes(), &self.signature)
    }
}

impl Serialize for AttestationReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::b64::serialize(&self.to_bytes(), s)
    }
}

impl<'de> Deserialize<'de> for AttestationReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: Vec<u8> = crate::b64::deserialize(d)?;
        Self::from_bytes(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct AuthorityFile {
    #[serde(with = "hex::serde")]
    secret: Vec<u8>,
    platforms: Vec<PlatformId>,
}

/// Signs reports for registered platforms only.
pub struct QuotingAuthority {
    keypair: SigningKeyPair,
    platforms: RwLock<BTreeSet<PlatformId>>,
    entropy: SharedEntropy,
}

impl fmt::Debug for QuotingAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuotingAuthority")
            .field("public", &self.keypair.public_key())
            .finish_non_exhaustive()
    }
}

impl QuotingAuthority {
    pub fn new(keypair: SigningKeyPair, entropy: SharedEntropy) -> Self {
        Self {
            keypair,
            platforms: RwLock::new(BTreeSet::new()),
            entropy,
        }
    }

    pub fn generate(entropy: SharedEntropy) -> Self {
        let keypair = SigningKeyPair::generate(entropy.as_ref());
        Self::new(keypair, entropy)
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.keypair.secret_bytes()
    }

    pub fn register_platform(&self, platform: PlatformId) {
        self.platforms.write().expect("lock").insert(platform);
    }

    pub fn platforms(&self) -> Vec<PlatformId> {
        self.platforms.read().expect("lock").iter().copied().collect()
    }

    /// Loads the authority key and platform registry, creating both on first use.
    pub fn load_or_create(path: &Path, entropy: SharedEntropy) -> Result<Self, TeeError> {
        if path.exists() {
            let file: AuthorityFile = serde_json::from_slice(&fs::read(path)?)
                .map_err(|e| TeeError::InvalidState(e.to_string()))?;
            let qa = Self::new(SigningKeyPair::from_secret_slice(&file.secret)?, entropy);
            for p in file.platforms {
                qa.register_platform(p);
            }
            return Ok(qa);
        }
        let qa = Self::generate(entropy);
        qa.save(path)?;
        Ok(qa)
    }

    pub fn save(&self, path: &Path) -> Result<(), TeeError> {
        let file = AuthorityFile {
            secret: self.keypair.secret_bytes().to_vec(),
            platforms: self.platforms(),
        };
        crate::util::write_atomic(path, &serde_json::to_vec_pretty(&file).expect("serializable"))?;
        Ok(())
    }

    pub fn is_registered(&self, platform: &PlatformId) -> bool {
        self.platforms.read().expect("lock").contains(platform)
    }

    pub fn issue_report(
        &self,
        platform: PlatformId,
        mre: Measurement,
        bound_pubkey: PublicKey,
    ) -> Result<AttestationReport, TeeError> {
        let nonce = ReportNonce(crypto::random_array(self.entropy.as_ref()));
        self.issue_report_with_nonce(platform, mre, bound_pubkey, nonce)
    }

    pub fn issue_report_with_nonce(
        &self,
        platform: PlatformId,
        mre: Measurement,
        bound_pubkey: PublicKey,
        nonce: ReportNonce,
    ) -> Result<AttestationReport, TeeError> {
        if !self.is_registered(&platform) {
            return Err(TeeError::UnknownPlatform(platform));
        }
        let mut report = AttestationReport {
            version: REPORT_VERSION,
            platform,
            mre,
            bound_pubkey,
            nonce,
            signature: Signature([0; 64]),
        };
        report.signature = self.keypair.sign(&report.signed_bytes());
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SeededEntropy;
    use crate::tee::measure;
    use std::sync::Arc;

    fn setup() -> (QuotingAuthority, PlatformId, PublicKey) {
        let entropy: SharedEntropy = Arc::new(SeededEntropy::new(42));
        let qa = QuotingAuthority::generate(entropy.clone());
        let platform = PlatformId::random(entropy.as_ref());
        qa.register_platform(platform);
        let key = SigningKeyPair::generate(entropy.as_ref()).public_key();
        (qa, platform, key)
    }

    #[test]
    fn authority_persists_key_and_platforms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.json");
        let entropy: SharedEntropy = Arc::new(SeededEntropy::new(5));
        let qa = QuotingAuthority::load_or_create(&path, entropy.clone()).unwrap();
        let p = PlatformId::random(entropy.as_ref());
        qa.register_platform(p);
        qa.save(&path).unwrap();
        let again = QuotingAuthority::load_or_create(&path, entropy).unwrap();
        assert_eq!(again.public_key(), qa.public_key());
        assert!(again.is_registered(&p));
    }

    #[test]
    fn issued_report_verifies() {
        let (qa, platform, key) = setup();
        let r = qa.issue_report(platform, measure(b"app"), key).unwrap();
        assert!(r.verify(&qa.public_key()));
        assert_eq!(r.to_bytes().len(), REPORT_LEN);
        assert_eq!(AttestationReport::from_bytes(&r.to_bytes()).unwrap(), r);
    }

    #[test]
    fn any_field_mutation_invalidates() {
        let (qa, platform, key) = setup();
        let r = qa.issue_report(platform, measure(b"app"), key).unwrap();
        let raw = r.to_bytes();
        // every bit of the signed region except the version byte (checked separately)
        for byte in 1..SIGNED_LEN {
            for bit in [0u8, 7] {
                let mut m = raw;
                m[byte] ^= 1 << bit;
                let parsed = AttestationReport::from_bytes(&m).unwrap();
                assert!(!parsed.verify(&qa.public_key()), "byte {byte} bit {bit}");
            }
        }
        let mut m = raw;
        m[0] = 2;
        assert!(AttestationReport::from_bytes(&m).is_err());
    }

    #[test]
    fn mutated_mre_fails() {
        let (qa, platform, key) = setup();
        let mut r = qa.issue_report(platform, measure(b"app"), key).unwrap();
        r.mre = measure(b"evil");
        assert!(!r.verify(&qa.public_key()));
    }

    #[test]
    fn unknown_platform_refused() {
        let (qa, _, key) = setup();
        let err = qa
            .issue_report(PlatformId([9; 16]), measure(b"app"), key)
            .unwrap_err();
        assert!(matches!(err, TeeError::UnknownPlatform(_)));
    }

    #[test]
    fn report_json_is_base64_of_canonical_bytes() {
        let (qa, platform, key) = setup();
        let r = qa.issue_report(platform, measure(b"app"), key).unwrap();
        let json = serde_json::to_value(r).unwrap();
        let back: AttestationReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
