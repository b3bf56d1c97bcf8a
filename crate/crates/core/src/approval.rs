//! Board-member approval: vote messages, decision rules and the approval
//! service that signs verdicts.
//!
//! A vote signs `"board-vote:" ‖ u16 len ‖ policy ‖ change_digest ‖ nonce ‖ verdict`
//! with the member key, where verdict is `0x01` approve or `0x00` reject.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::crypto::{self, hex_newtype_serde, Digest, EntropySource, PublicKey, Signature, SigningKeyPair};
use crate::policy::{BoardMember, Vote};

pub const DEFAULT_NONCE_CACHE: usize = 65_536;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ApprovalNonce(pub [u8; 16]);

hex_newtype_serde!(ApprovalNonce, 16);

impl fmt::Debug for ApprovalNonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ApprovalNonce({self})")
    }
}

impl ApprovalNonce {
    pub fn random(entropy: &dyn EntropySource) -> Self {
        Self(crypto::random_array(entropy))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub policy: String,
    pub change_digest: Digest,
    pub nonce: ApprovalNonce,
    /// Human-readable summary; not covered by the vote.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedVote {
    pub member: String,
    pub policy: String,
    pub change_digest: Digest,
    pub nonce: ApprovalNonce,
    pub verdict: Vote,
    pub signature: Signature,
}

pub fn vote_message(policy: &str, digest: &Digest, nonce: &ApprovalNonce, verdict: Vote) -> Vec<u8> {
    let mut m = Vec::with_capacity(11 + 2 + policy.len() + 32 + 16 + 1);
    m.extend_from_slice(b"board-vote:");
    m.extend_from_slice(&(policy.len() as u16).to_be_bytes());
    m.extend_from_slice(policy.as_bytes());
    m.extend_from_slice(digest.as_bytes());
    m.extend_from_slice(&nonce.0);
    m.push(match verdict {
        Vote::Approve => 1,
        Vote::Reject => 0,
    });
    m
}

impl SignedVote {
    pub fn sign(key: &SigningKeyPair, member: &str, req: &ApprovalRequest, verdict: Vote) -> Self {
        let signature = key.sign(&vote_message(&req.policy, &req.change_digest, &req.nonce, verdict));
        Self {
            member: member.to_string(),
            policy: req.policy.clone(),
            change_digest: req.change_digest,
            nonce: req.nonce,
            verdict,
            signature,
        }
    }

    /// True iff the vote answers `req` and is signed by `key`.
    pub fn verify(&self, key: &PublicKey, req: &ApprovalRequest) -> bool {
        self.policy == req.policy
            && self.change_digest == req.change_digest
            && self.nonce == req.nonce
            && key.verify(
                &vote_message(&self.policy, &self.change_digest, &self.nonce, self.verdict),
                &self.signature,
            )
    }
}

/// Decides how a member votes on a request.
pub trait DecisionRule: Send + Sync {
    fn decide(&self, req: &ApprovalRequest) -> Vote;
}

/// Declarative rules loadable from configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum StaticRule {
    ApproveAll,
    RejectAll,
    /// Approve only listed policies.
    PolicyAllowList { policies: BTreeSet<String> },
    /// Reject listed policies, approve the rest.
    PolicyDenyList { policies: BTreeSet<String> },
    /// Approve only pre-reviewed change digests.
    DigestAllowList { digests: BTreeSet<Digest> },
}

impl DecisionRule for StaticRule {
    fn decide(&self, req: &ApprovalRequest) -> Vote {
        let ok = match self {
            StaticRule::ApproveAll => true,
            StaticRule::RejectAll => false,
            StaticRule::PolicyAllowList { policies } => policies.contains(&req.policy),
            StaticRule::PolicyDenyList { policies } => !policies.contains(&req.policy),
            StaticRule::DigestAllowList { digests } => digests.contains(&req.change_digest),
        };
        if ok {
            Vote::Approve
        } else {
            Vote::Reject
        }
    }
}

/// Asks an operator on a line-oriented console; anything but `y`/`yes` rejects.
pub struct InteractiveRule<R, W> {
    io: Mutex<(R, W)>,
}

impl<R: BufRead + Send, W: Write + Send> InteractiveRule<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self {
            io: Mutex::new((input, output)),
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> DecisionRule for InteractiveRule<R, W> {
    fn decide(&self, req: &ApprovalRequest) -> Vote {
        let mut guard = self.io.lock().expect("console lock");
        let (input, output) = &mut *guard;
        let _ = writeln!(
            output,
            "approve change {} to policy {:?}? {}\n[y/N] ",
            req.change_digest, req.policy, req.summary
        );
        let _ = output.flush();
        let mut line = String::new();
        match input.read_line(&mut line) {
            Ok(_) if matches!(line.trim().to_ascii_lowercase().as_str(), "y" | "yes") => Vote::Approve,
            _ => Vote::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApprovalError {
    #[error("nonce already seen")]
    Replay,
    #[error("malformed request: {0}")]
    Malformed(String),
}

/// Bounded set of recently seen nonces; the oldest entry is evicted first.
#[derive(Debug)]
struct NonceCache {
    seen: HashSet<(String, ApprovalNonce)>,
    order: VecDeque<(String, ApprovalNonce)>,
    capacity: usize,
}

impl NonceCache {
    fn insert(&mut self, key: (String, ApprovalNonce)) -> bool {
        if self.seen.contains(&key) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.seen.insert(key.clone());
        self.order.push_back(key);
        true
    }
}

/// One board member's approval endpoint.
pub struct ApprovalService {
    member: String,
    key: SigningKeyPair,
    rule: Box<dyn DecisionRule>,
    nonces: Mutex<NonceCache>,
}

impl fmt::Debug for ApprovalService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApprovalService")
            .field("member", &self.member)
            .field("public", &self.key.public_key())
            .finish_non_exhaustive()
    }
}

impl ApprovalService {
    pub fn new(member: impl Into<String>, key: SigningKeyPair, rule: Box<dyn DecisionRule>) -> Self {
        Self::with_cache(member, key, rule, DEFAULT_NONCE_CACHE)
    }

    pub fn with_cache(
        member: impl Into<String>,
        key: SigningKeyPair,
        rule: Box<dyn DecisionRule>,
        capacity: usize,
    ) -> Self {
        Self {
            member: member.into(),
            key,
            rule,
            nonces: Mutex::new(NonceCache {
                seen: HashSet::new(),
                order: VecDeque::new(),
                capacity: capacity.max(1),
            }),
        }
    }

    pub fn member(&self) -> &str {
        &self.member
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    pub fn handle_approval(&self, req: &ApprovalRequest) -> Result<SignedVote, ApprovalError> {
        if req.policy.is_empty() || req.policy.len() > u16::MAX as usize {
            return Err(ApprovalError::Malformed("policy name".into()));
        }
        if !self
            .nonces
            .lock()
            .expect("nonce cache")
            .insert((req.policy.clone(), req.nonce))
        {
            return Err(ApprovalError::Replay);
        }
        let verdict = self.rule.decide(req);
        Ok(SignedVote::sign(&self.key, &self.member, req, verdict))
    }
}

/// Delivers an approval request to a board member.
pub trait ApprovalTransport: Send + Sync {
    fn request_vote(&self, member: &BoardMember, req: &ApprovalRequest) -> Result<SignedVote, String>;
}

/// Routes requests to in-process approval services keyed by URL.
#[derive(Default, Clone)]
pub struct LocalApprovers {
    services: Arc<Mutex<BTreeMap<String, Arc<ApprovalService>>>>,
}

impl LocalApprovers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, url: impl Into<String>, service: Arc<ApprovalService>) {
        self.services.lock().expect("approvers").insert(url.into(), service);
    }

    pub fn unregister(&self, url: &str) {
        self.services.lock().expect("approvers").remove(url);
    }
}

impl ApprovalTransport for LocalApprovers {
    fn request_vote(&self, member: &BoardMember, req: &ApprovalRequest) -> Result<SignedVote, String> {
        let svc = self
            .services
            .lock()
            .expect("approvers")
            .get(&member.url)
            .cloned()
            .ok_or_else(|| format!("no approval service at {}", member.url))?;
        svc.handle_approval(req).map_err(|e| e.to_string())
    }
}

/// Transport for boards whose members are never reachable.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoApprovers;

impl ApprovalTransport for NoApprovers {
    fn request_vote(&self, member: &BoardMember, _req: &ApprovalRequest) -> Result<SignedVote, String> {
        Err(format!("approval service at {} unreachable", member.url))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash, SeededEntropy};

    fn request(e: &SeededEntropy, policy: &str) -> ApprovalRequest {
        ApprovalRequest {
            policy: policy.into(),
            change_digest: hash(policy.as_bytes()),
            nonce: ApprovalNonce::random(e),
            summary: String::new(),
        }
    }

    #[test]
    fn allow_listed_digest_approves_and_verifies() {
        let e = SeededEntropy::new(3);
        let key = SigningKeyPair::generate(&e);
        let req = request(&e, "p");
        let rule = StaticRule::DigestAllowList {
            digests: [req.change_digest].into(),
        };
        let svc = ApprovalService::new("alice", key.clone(), Box::new(rule));
        let vote = svc.handle_approval(&req).unwrap();
        assert_eq!(vote.verdict, Vote::Approve);
        assert!(vote.verify(&key.public_key(), &req));
        let other = SigningKeyPair::generate(&e).public_key();
        assert!(!vote.verify(&other, &req));
        let unlisted = request(&e, "q");
        assert_eq!(svc.handle_approval(&unlisted).unwrap().verdict, Vote::Reject);
    }

    #[test]
    fn deny_rule_rejects() {
        let e = SeededEntropy::new(4);
        let svc = ApprovalService::new("bob", SigningKeyPair::generate(&e), Box::new(StaticRule::RejectAll));
        let req = request(&e, "p");
        let vote = svc.handle_approval(&req).unwrap();
        assert_eq!(vote.verdict, Vote::Reject);
        assert!(vote.verify(&svc.public_key(), &req));
    }

    #[test]
    fn replayed_nonce_refused() {
        let e = SeededEntropy::new(5);
        let svc = ApprovalService::with_cache("c", SigningKeyPair::generate(&e), Box::new(StaticRule::ApproveAll), 8);
        let reqs: Vec<_> = (0..8).map(|_| request(&e, "p")).collect();
        for r in &reqs {
            svc.handle_approval(r).unwrap();
        }
        // oracle: every nonce still within capacity is remembered
        for r in &reqs {
            assert_eq!(svc.handle_approval(r), Err(ApprovalError::Replay));
        }
    }

    #[test]
    fn vote_is_bound_to_every_field() {
        let e = SeededEntropy::new(6);
        let key = SigningKeyPair::generate(&e);
        let req = request(&e, "p");
        let vote = SignedVote::sign(&key, "m", &req, Vote::Approve);
        let mut flipped = vote.clone();
        flipped.verdict = Vote::Reject;
        assert!(!flipped.verify(&key.public_key(), &req));
        let mut other = req.clone();
        other.nonce = ApprovalNonce::random(&e);
        assert!(!vote.verify(&key.public_key(), &other));
        other = req.clone();
        other.change_digest = hash(b"x");
        assert!(!vote.verify(&key.public_key(), &other));
    }

    #[test]
    fn interactive_rule_reads_console() {
        let e = SeededEntropy::new(7);
        let rule = InteractiveRule::new(std::io::Cursor::new(b"yes\nno\n".to_vec()), Vec::<u8>::new());
        assert_eq!(rule.decide(&request(&e, "p")), Vote::Approve);
        assert_eq!(rule.decide(&request(&e, "p")), Vote::Reject);
        assert_eq!(rule.decide(&request(&e, "p")), Vote::Reject);
    }

    #[test]
    fn static_rule_config_round_trip() {
        let yaml = "rule: policy-deny-list\npolicies: [evil]\n";
        let rule: StaticRule = serde_yaml::from_str(yaml).unwrap();
        let e = SeededEntropy::new(8);
        assert_eq!(rule.decide(&request(&e, "evil")), Vote::Reject);
        assert_eq!(rule.decide(&request(&e, "good")), Vote::Approve);
    }
}
