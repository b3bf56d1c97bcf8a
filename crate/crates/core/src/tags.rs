//! Expected volume tags and the restart admission rule.

use serde::{Deserialize, Serialize};

use crate::fs_shield::VolumeTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagEvent {
    Close,
    Sync,
    Exit,
}

impl std::fmt::Display for TagEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TagEvent::Close => "close",
            TagEvent::Sync => "sync",
            TagEvent::Exit => "exit",
        })
    }
}

/// Last acknowledged tag of a writable volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    pub policy: String,
    pub volume: String,
    /// Service whose session pushed the tag; empty when set by a policy update.
    pub service: String,
    pub expected: VolumeTag,
    pub last_event: TagEvent,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdmitRefusal {
    #[error("volume {volume}: presented tag {presented} differs from expected {expected} (rollback suspected)")]
    Freshness {
        volume: String,
        expected: VolumeTag,
        presented: VolumeTag,
    },
    #[error("volume {volume}: previous run ended without an exit tag (last event {last_event}); a board-approved policy update of the tag is required")]
    RestartGate { volume: String, last_event: TagEvent },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Clean,
    /// Non-strict restart after a run that did not push an exit tag.
    MissingExit,
}

/// Strict-mode gate, checked before any configuration is released.
pub fn check_restart_gate(strict: bool, volume: &str, record: Option<&TagRecord>) -> Result<Admission, AdmitRefusal> {
    match record {
        Some(r) if r.last_event != TagEvent::Exit => {
            if strict {
                Err(AdmitRefusal::RestartGate {
                    volume: volume.to_string(),
                    last_event: r.last_event,
                })
            } else {
                Ok(Admission::MissingExit)
            }
        }
        _ => Ok(Admission::Clean),
    }
}

/// A volume without a record is expected to be in its initial state.
pub fn expected_tag(record: Option<&TagRecord>, initial: VolumeTag) -> VolumeTag {
    record.map_or(initial, |r| r.expected)
}

/// Admits iff `presented` equals the expected tag and, in strict mode, the
/// previous run pushed its tag at exit.
pub fn admit_restart(
    strict: bool,
    volume: &str,
    record: Option<&TagRecord>,
    initial: VolumeTag,
    presented: VolumeTag,
) -> Result<Admission, AdmitRefusal> {
    let admission = check_restart_gate(strict, volume, record)?;
    let expected = expected_tag(record, initial);
    if presented != expected {
        return Err(AdmitRefusal::Freshness {
            volume: volume.to_string(),
            expected,
            presented,
        });
    }
    Ok(admission)
}
