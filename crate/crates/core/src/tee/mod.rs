//! Software stand-in for the trusted-execution platform.
//!
//! Provides code measurements, a quoting authority issuing signed reports,
//! per-platform sealed storage and a rate-limited monotonic counter.

mod counter;
mod report;

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crypto::{
    self, hash, hash_parts, hex_newtype_serde, CryptoError, Digest, EntropySource, KeyPurpose,
    SymmetricKey,
};

pub use counter::{CounterClock, PlatformCounter, COUNTER_FILE_LEN, DEFAULT_MIN_INCREMENT_INTERVAL};
pub use report::{AttestationReport, QuotingAuthority, ReportNonce, REPORT_LEN, REPORT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum TeeError {
    #[error("platform {0} is not registered with the quoting authority")]
    UnknownPlatform(PlatformId),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("sealed blob does not belong to this platform and measurement")]
    SealMismatch,
    #[error("counter file corrupted: {0}")]
    CounterCorrupted(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid platform state: {0}")]
    InvalidState(String),
}

/// Hash of an application's code bundle (its MRENCLAVE analog).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Measurement(pub Digest);

impl Measurement {
    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", &self.0.to_string()[..16])
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::str::FromStr for Measurement {
    type Err = CryptoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(Measurement)
    }
}

impl Serialize for Measurement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Measurement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Digest::deserialize(d).map(Measurement)
    }
}

pub fn measure(code: &[u8]) -> Measurement {
    Measurement(hash(code))
}

/// Opaque 16-byte host identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlatformId(pub [u8; 16]);

hex_newtype_serde!(PlatformId, 16);

impl fmt::Debug for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlatformId({self})")
    }
}

impl PlatformId {
    pub fn random(entropy: &dyn EntropySource) -> Self {
        Self(crypto::random_array(entropy))
    }
}

/// Ciphertext bound to the (platform, measurement) that sealed it.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub platform: PlatformId,
    pub mre: Measurement,
    #[serde(with = "crate::b64")]
    pub ciphertext: Vec<u8>,
}

impl fmt::Debug for SealedBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedBlob")
            .field("platform", &self.platform)
            .field("mre", &self.mre)
            .field("len", &self.ciphertext.len())
            .finish()
    }
}

/// A simulated host. Its root secret stands in for the CPU fuse key from
/// which sealing keys are derived; it never leaves the platform.
#[derive(Clone)]
pub struct Platform {
    id: PlatformId,
    root_secret: [u8; 32],
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform").field("id", &self.id).finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct PlatformFile {
    id: PlatformId,
    root_secret: String,
}

impl Platform {
    pub fn new(id: PlatformId, root_secret: [u8; 32]) -> Self {
        Self { id, root_secret }
    }

    pub fn generate(entropy: &dyn EntropySource) -> Self {
        Self::new(PlatformId::random(entropy), crypto::random_array(entropy))
    }

    /// Loads the simulated host identity, creating it on first use so that
    /// it stays stable across restarts.
    pub fn load_or_create(path: &Path, entropy: &dyn EntropySource) -> Result<Self, TeeError> {
        if path.exists() {
            let raw = fs::read(path)?;
            let file: PlatformFile = serde_json::from_slice(&raw)
                .map_err(|e| TeeError::InvalidState(e.to_string()))?;
            let secret = hex::decode(&file.root_secret)
                .ok()
                .and_then(|v| <[u8; 32]>::try_from(v).ok())
                .ok_or_else(|| TeeError::InvalidState("bad platform root secret".into()))?;
            return Ok(Self::new(file.id, secret));
        }
        let platform = Self::generate(entropy);
        let file = PlatformFile {
            id: platform.id,
            root_secret: hex::encode(platform.root_secret),
        };
        crate::util::write_atomic(path, &serde_json::to_vec_pretty(&file).expect("serializable"))?;
        Ok(platform)
    }

    pub fn id(&self) -> PlatformId {
        self.id
    }

    fn sealing_key(&self, mre: &Measurement) -> SymmetricKey {
        let k = hash_parts(&[b"sealing-key:", &self.root_secret, mre.as_bytes()]);
        SymmetricKey::from_bytes(k.0, KeyPurpose::Sealing)
    }

    fn sealing_aad(platform: &PlatformId, mre: &Measurement) -> Vec<u8> {
        let mut aad = Vec::with_capacity(48);
        aad.extend_from_slice(&platform.0);
        aad.extend_from_slice(mre.as_bytes());
        aad
    }

    pub fn seal(&self, mre: &Measurement, data: &[u8], entropy: &dyn EntropySource) -> SealedBlob {
        let ciphertext = crypto::seal_encrypt(
            &self.sealing_key(mre),
            entropy,
            data,
            &Self::sealing_aad(&self.id, mre),
        );
        SealedBlob {
            platform: self.id,
            mre: *mre,
            ciphertext,
        }
    }

    /// Succeeds only for the platform and measurement that sealed `blob`.
    pub fn unseal(&self, mre: &Measurement, blob: &SealedBlob) -> Result<Vec<u8>, TeeError> {
        crypto::seal_decrypt(
            &self.sealing_key(mre),
            &blob.ciphertext,
            &Self::sealing_aad(&self.id, mre),
        )
        .map_err(|_| TeeError::SealMismatch)
    }
}

pub fn seal(
    platform: &Platform,
    mre: &Measurement,
    data: &[u8],
    entropy: &dyn EntropySource,
) -> SealedBlob {
    platform.seal(mre, data, entropy)
}

pub fn unseal(platform: &Platform, mre: &Measurement, blob: &SealedBlob) -> Result<Vec<u8>, TeeError> {
    platform.unseal(mre, blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SeededEntropy;

    #[test]
    fn measurement_is_hash_of_code() {
        assert_eq!(measure(b"bundle"), measure(b"bundle"));
        assert_ne!(measure(b"bundle"), measure(b"bundle2"));
        assert_eq!(measure(b"").0, hash(b""));
    }

    #[test]
    fn distinct_bundles_measure_differently() {
        let entropy = SeededEntropy::new(11);
        let mut seen = std::collections::HashSet::new();
        for i in 0..500u32 {
            let mut code = vec![0u8; 64];
            entropy.fill(&mut code);
            code.extend_from_slice(&i.to_le_bytes());
            assert!(seen.insert(measure(&code)));
        }
    }

    #[test]
    fn sealing_mismatch_matrix() {
        let entropy = SeededEntropy::new(5);
        let p1 = Platform::generate(&entropy);
        let p2 = Platform::generate(&entropy);
        let m1 = measure(b"one");
        let m2 = measure(b"two");
        let blob = p1.seal(&m1, b"identity keys", &entropy);

        for (platform, mre, ok) in [(&p1, m1, true), (&p1, m2, false), (&p2, m1, false), (&p2, m2, false)] {
            let res = platform.unseal(&mre, &blob);
            assert_eq!(res.is_ok(), ok, "platform {:?} mre {:?}", platform.id(), mre);
            if ok {
                assert_eq!(res.unwrap(), b"identity keys");
            } else {
                assert!(matches!(res, Err(TeeError::SealMismatch)));
            }
        }
    }

    #[test]
    fn platform_identity_is_stable_across_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("platform.json");
        let entropy = SeededEntropy::new(1);
        let a = Platform::load_or_create(&path, &entropy).unwrap();
        let b = Platform::load_or_create(&path, &entropy).unwrap();
        assert_eq!(a.id(), b.id());
        let m = measure(b"svc");
        let blob = a.seal(&m, b"x", &entropy);
        assert_eq!(b.unseal(&m, &blob).unwrap(), b"x");
    }
}
