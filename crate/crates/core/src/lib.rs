//! Trust management for applications running in (simulated) trusted
//! execution environments: attestation, secret provisioning under
//! board-governed policies, and rollback protection for applications and
//! for the service itself.

pub mod b64;
pub mod crypto;
pub mod fs_shield;
pub mod approval;
pub mod attestation;
pub mod policy;
pub mod rollback;
pub mod runtime;
pub mod service;
pub mod store;
pub mod tags;
pub mod tee;
pub mod util;
