//! JSON bodies of the REST protocol. Binary fields are base64; digests,
//! keys and tokens are hex.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use warden_core::attestation::SessionToken;
use warden_core::fs_shield::VolumeTag;
use warden_core::tags::TagEvent;
use warden_core::tee::AttestationReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRequest {
    pub report: AttestationReport,
    pub policy: String,
    pub service: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmitRequest {
    pub session: SessionToken,
    pub tags: BTreeMap<String, VolumeTag>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagPushRequest {
    pub session: SessionToken,
    pub volume: String,
    pub tag: VolumeTag,
    pub event: TagEvent,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TagPushResponse {
    pub sequence: u64,
}

/// Policy text in YAML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyBody {
    pub policy: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Admitted {
    pub admitted: bool,
}
