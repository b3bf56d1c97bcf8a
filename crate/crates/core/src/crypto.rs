//! Hashing, signatures and authenticated encryption.
//!
//! The concrete algorithms are fixed once in [`ALGORITHMS`] and appear by
//! name in serialized reports and certificates:
//!
//! | role        | algorithm            |
//! |-------------|----------------------|
//! | hash        | SHA-256              |
//! | signature   | Ed25519              |
//! | AEAD        | ChaCha20-Poly1305    |
//!
//! All randomness is drawn from an [`EntropySource`] so that tests can run
//! with a seeded generator.

use std::fmt;
use std::sync::{Arc, Mutex};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::pkcs8::EncodePrivateKey;
use ed25519_dalek::Signer;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

/// Algorithm identifiers of this deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Algorithms {
    pub hash: &'static str,
    pub signature: &'static str,
    pub aead: &'static str,
}

pub const ALGORITHMS: Algorithms = Algorithms {
    hash: "sha256",
    signature: "ed25519",
    aead: "chacha20poly1305",
};

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const SYMMETRIC_KEY_LEN: usize = 32;
pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key material: {0}")]
    MalformedKey(String),
    #[error("malformed signature")]
    MalformedSignature,
    #[error("authentication failed: ciphertext or associated data was tampered with")]
    Authentication,
    #[error("ciphertext truncated")]
    Truncated,
    #[error("invalid hex: {0}")]
    Hex(String),
}

/// Source of cryptographically secure random bytes.
pub trait EntropySource: Send + Sync {
    fn fill(&self, buf: &mut [u8]);
}

/// Operating-system randomness.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsEntropy;

impl EntropySource for OsEntropy {
    fn fill(&self, buf: &mut [u8]) {
        rand::rngs::OsRng.fill_bytes(buf);
    }
}

/// Deterministic generator for tests and reproducible simulations.
pub struct SeededEntropy(Mutex<ChaCha20Rng>);

impl SeededEntropy {
    pub fn new(seed: u64) -> Self {
        Self(Mutex::new(ChaCha20Rng::seed_from_u64(seed)))
    }
}

impl EntropySource for SeededEntropy {
    fn fill(&self, buf: &mut [u8]) {
        self.0.lock().expect("entropy lock poisoned").fill_bytes(buf);
    }
}

pub type SharedEntropy = Arc<dyn EntropySource>;

pub fn os_entropy() -> SharedEntropy {
    Arc::new(OsEntropy)
}

pub fn random_array<const N: usize>(entropy: &dyn EntropySource) -> [u8; N] {
    let mut out = [0u8; N];
    entropy.fill(&mut out);
    out
}

macro_rules! hex_newtype_serde {
    ($ty:ident, $len:expr) => {
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl ::std::str::FromStr for $ty {
            type Err = $crate::crypto::CryptoError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let raw = hex::decode(s.trim()).map_err(|e| $crate::crypto::CryptoError::Hex(e.to_string()))?;
                let arr: [u8; $len] = raw.try_into().map_err(|v: Vec<u8>| {
                    $crate::crypto::CryptoError::Hex(format!("expected {} bytes, got {}", $len, v.len()))
                })?;
                Ok(Self(arr))
            }
        }

        impl ::serde::Serialize for $ty {
            fn serialize<S: ::serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> ::serde::Deserialize<'de> for $ty {
            fn deserialize<D: ::serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = <String as ::serde::Deserialize>::deserialize(d)?;
                s.parse().map_err(::serde::de::Error::custom)
            }
        }
    };
}
pub(crate) use hex_newtype_serde;

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; DIGEST_LEN]);

hex_newtype_serde!(Digest, DIGEST_LEN);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &hex::encode(self.0)[..16])
    }
}

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn hash(data: &[u8]) -> Digest {
    hash_parts(&[data])
}

/// Hash of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    use sha2::Digest as _;
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

hex_newtype_serde!(PublicKey, PUBLIC_KEY_LEN);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.0)[..16])
    }
}

impl PublicKey {
    /// Parses and validates a 32-byte encoded curve point.
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::MalformedKey(format!("expected 32 bytes, got {}", bytes.len())))?;
        ed25519_dalek::VerifyingKey::from_bytes(&arr)
            .map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    /// Fingerprint used to identify certificate holders.
    pub fn fingerprint(&self) -> Digest {
        hash_parts(&[b"key-fingerprint:", &self.0])
    }

    /// Strict verification. Malformed key material is an error, never an accept.
    pub fn verify_strict(&self, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
        let vk = ed25519_dalek::VerifyingKey::from_bytes(&self.0)
            .map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
        let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
        Ok(vk.verify_strict(msg, &sig).is_ok())
    }

    pub fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        self.verify_strict(msg, sig).unwrap_or(false)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

hex_newtype_serde!(Signature, SIGNATURE_LEN);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &hex::encode(self.0)[..16])
    }
}

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes
            .try_into()
            .map(Self)
            .map_err(|_| CryptoError::MalformedSignature)
    }
}

/// Ed25519 signing key and its public half.
#[derive(Clone)]
pub struct SigningKeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public_key())
            .finish_non_exhaustive()
    }
}

impl SigningKeyPair {
    pub fn generate(entropy: &dyn EntropySource) -> Self {
        Self::from_secret_bytes(random_array(entropy))
    }

    pub fn from_secret_bytes(secret: [u8; 32]) -> Self {
        Self {
            signing: ed25519_dalek::SigningKey::from_bytes(&secret),
        }
    }

    pub fn from_secret_slice(secret: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = secret
            .try_into()
            .map_err(|_| CryptoError::MalformedKey(format!("expected 32-byte seed, got {}", secret.len())))?;
        Ok(Self::from_secret_bytes(arr))
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }

    /// PKCS#8 v2 DER encoding, for X.509 tooling.
    pub fn to_pkcs8_der(&self) -> Vec<u8> {
        self.signing
            .to_pkcs8_der()
            .expect("ed25519 pkcs8 encoding is infallible")
            .as_bytes()
            .to_vec()
    }
}

pub fn sign(key: &SigningKeyPair, msg: &[u8]) -> Signature {
    key.sign(msg)
}

pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    public.verify(msg, sig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyPurpose {
    FsEncryption,
    DbEncryption,
    Sealing,
}

/// 256-bit symmetric key. Deliberately not `Serialize`.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    bytes: [u8; SYMMETRIC_KEY_LEN],
    purpose: KeyPurpose,
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({:?}, <redacted>)", self.purpose)
    }
}

impl SymmetricKey {
    pub fn generate(entropy: &dyn EntropySource, purpose: KeyPurpose) -> Self {
        Self {
            bytes: random_array(entropy),
            purpose,
        }
    }

    pub fn from_bytes(bytes: [u8; SYMMETRIC_KEY_LEN], purpose: KeyPurpose) -> Self {
        Self { bytes, purpose }
    }

    pub fn from_slice(bytes: &[u8], purpose: KeyPurpose) -> Result<Self, CryptoError> {
        let bytes = bytes
            .try_into()
            .map_err(|_| CryptoError::MalformedKey(format!("expected 32-byte key, got {}", bytes.len())))?;
        Ok(Self { bytes, purpose })
    }

    pub fn purpose(&self) -> KeyPurpose {
        self.purpose
    }

    pub fn as_bytes(&self) -> &[u8; SYMMETRIC_KEY_LEN] {
        &self.bytes
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new((&self.bytes).into())
    }
}

/// Encrypts with an explicit nonce. Output is `nonce ‖ ciphertext ‖ tag`.
pub fn seal_encrypt_with_nonce(
    key: &SymmetricKey,
    nonce: [u8; AEAD_NONCE_LEN],
    plaintext: &[u8],
    aad: &[u8],
) -> Vec<u8> {
    let ct = key
        .cipher()
        .encrypt((&nonce).into(), Payload { msg: plaintext, aad })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(AEAD_NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

/// Encrypts under a fresh random nonce.
pub fn seal_encrypt(
    key: &SymmetricKey,
    entropy: &dyn EntropySource,
    plaintext: &[u8],
    aad: &[u8],
) -> Vec<u8> {
    seal_encrypt_with_nonce(key, random_array(entropy), plaintext, aad)
}

pub fn seal_decrypt(key: &SymmetricKey, sealed: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < AEAD_NONCE_LEN + AEAD_TAG_LEN {
        return Err(CryptoError::Truncated);
    }
    let (nonce, ct) = sealed.split_at(AEAD_NONCE_LEN);
    key.cipher()
        .decrypt(nonce.into(), Payload { msg: ct, aad })
        .map_err(|_| CryptoError::Authentication)
}

/// Raw 256-bit key bytes for transfer over an authenticated channel or
/// storage inside an encrypted container. Debug output is redacted.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct KeyMaterial(pub [u8; SYMMETRIC_KEY_LEN]);

hex_newtype_serde!(KeyMaterial, SYMMETRIC_KEY_LEN);

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyMaterial(<redacted>)")
    }
}

impl KeyMaterial {
    pub fn generate(entropy: &dyn EntropySource) -> Self {
        Self(random_array(entropy))
    }

    pub fn to_key(&self, purpose: KeyPurpose) -> SymmetricKey {
        SymmetricKey::from_bytes(self.0, purpose)
    }
}

impl SymmetricKey {
    pub fn material(&self) -> KeyMaterial {
        KeyMaterial(self.bytes)
    }
}
