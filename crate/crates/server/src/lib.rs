//! Network face of the trust service: mutual-TLS REST endpoints, the
//! board member approval daemon, an HTTPS client, and benchmarks.

pub mod api;
pub mod approval;
pub mod bench;
pub mod client;
pub mod serve;
pub mod tls;
pub mod wire;

pub use client::{attest_instance, HttpsClient, RemoteConnector};
pub use serve::{Peer, ServerHandle};
