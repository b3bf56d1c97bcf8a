#![allow(dead_code)]

use std::net::TcpListener;
use std::sync::Arc;

use warden_core::approval::{ApprovalService, StaticRule};
use warden_core::crypto::{SeededEntropy, SharedEntropy, SigningKeyPair};
use warden_core::service::{ServiceOptions, Storage, TrustService};
use warden_core::tee::{CounterClock, Platform, PlatformCounter, QuotingAuthority, DEFAULT_MIN_INCREMENT_INTERVAL};
use warden_server::api::serve_service;
use warden_server::approval::{serve_daemon, HttpApprovers};
use warden_server::ServerHandle;

pub fn listener() -> TcpListener {
    TcpListener::bind("127.0.0.1:0").unwrap()
}

pub struct Daemon {
    pub key: SigningKeyPair,
    pub handle: ServerHandle,
}

impl Daemon {
    pub fn url(&self) -> String {
        format!("https://{}/approve", self.handle.addr())
    }

    pub fn member_yaml(&self, name: &str, veto: bool) -> String {
        format!(
            "    - name: {name}\n      certificate: {}\n      url: {}\n      veto: {veto}\n",
            self.key.public_key(),
            self.url()
        )
    }
}

pub fn daemon(name: &str, rule: StaticRule, entropy: &SharedEntropy) -> Daemon {
    let key = SigningKeyPair::generate(entropy.as_ref());
    let svc = Arc::new(ApprovalService::new(name, key.clone(), Box::new(rule)));
    let handle = serve_daemon(listener(), svc, &key, entropy.as_ref(), 2).unwrap();
    Daemon { key, handle }
}

pub struct World {
    pub entropy: SharedEntropy,
    pub platform: Platform,
    pub qa: QuotingAuthority,
    pub counter: Arc<PlatformCounter>,
    pub service: TrustService,
    pub server: ServerHandle,
}

impl World {
    pub fn new(seed: u64) -> Self {
        Self::with_storage(seed, Storage::Memory)
    }

    pub fn with_storage(seed: u64, storage: Storage) -> Self {
        let entropy: SharedEntropy = Arc::new(SeededEntropy::new(seed));
        let platform = Platform::generate(entropy.as_ref());
        let qa = QuotingAuthority::generate(entropy.clone());
        qa.register_platform(platform.id());
        let service_counter = Arc::new(PlatformCounter::in_memory(CounterClock::Virtual, DEFAULT_MIN_INCREMENT_INTERVAL));
        let counter = service_counter.clone();
        let transport = Arc::new(HttpApprovers::new(SigningKeyPair::generate(entropy.as_ref())));
        let service = TrustService::start(&platform, &qa, counter, ServiceOptions::new(storage, transport, entropy.clone())).unwrap();
        let counter = service_counter;
        let server = serve_service(listener(), service.clone(), 2).unwrap();
        Self {
            entropy,
            platform,
            qa,
            counter,
            service,
            server,
        }
    }

    /// Stops the service and starts a fresh instance on the same storage.
    pub fn restart(&mut self, storage: Storage) {
        self.service.shutdown().unwrap();
        let transport = Arc::new(HttpApprovers::new(SigningKeyPair::generate(self.entropy.as_ref())));
        self.service = TrustService::start(&self.platform, &self.qa, self.counter.clone(), ServiceOptions::new(storage, transport, self.entropy.clone())).unwrap();
        std::mem::replace(&mut self.server, serve_service(listener(), self.service.clone(), 2).unwrap()).stop();
    }

    pub fn addr(&self) -> String {
        self.server.addr().to_string()
    }
}
