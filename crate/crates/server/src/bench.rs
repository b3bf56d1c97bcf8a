//! Micro-benchmarks: monotonic counters, application attestation and the
//! approval endpoint. Results are plain rows that serialize to CSV.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use hyper::Method;
use serde::Serialize;
use warden_core::approval::{ApprovalNonce, ApprovalRequest, ApprovalService, SignedVote, StaticRule};
use warden_core::crypto::{hash, EntropySource, OsEntropy, SeededEntropy, SharedEntropy, SigningKeyPair};
use warden_core::policy::parse_policy;
use warden_core::runtime::{startup, ApplicationContext, RuntimeOptions, ServiceClient};
use warden_core::service::{ServiceOptions, Storage, TrustService};
use warden_core::tee::{measure, CounterClock, Platform, PlatformCounter, QuotingAuthority, DEFAULT_MIN_INCREMENT_INTERVAL};

use crate::api::serve_service;
use crate::approval::serve_daemon;
use crate::client::HttpsClient;
use crate::tls::ServerTrust;

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub ci95: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(samples: &[f64]) -> Summary {
    let n = samples.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            ci95: f64::NAN,
            min: f64::NAN,
            max: f64::NAN,
        };
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Summary {
        n,
        mean,
        ci95: 1.96 * (var / n as f64).sqrt(),
        min: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Value at quantile `q` of `samples` (nearest rank).
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[idx]
}

/// Writes rows as CSV with a header from the field names.
pub fn write_csv<T: Serialize>(out: impl std::io::Write, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

// ---------------------------------------------------------------- counters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterVariant {
    Platform,
    FileNative,
    FileShielded,
    FileShieldedStrict,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterRow {
    pub variant: CounterVariant,
    pub increments: u64,
    pub seconds: f64,
    pub per_second: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterRates {
    pub rows: Vec<CounterRow>,
}

impl CounterRates {
    pub fn rate(&self, v: CounterVariant) -> f64 {
        self.rows.iter().find(|r| r.variant == v).map_or(f64::NAN, |r| r.per_second)
    }
}

#[derive(Debug, Clone)]
pub struct CounterConfig {
    /// Wall-clock budget per variant.
    pub duration: Duration,
    /// Platform counter clock; virtual time makes the platform row exact.
    pub clock: CounterClock,
    /// Threads contending for the platform counter.
    pub platform_threads: usize,
}

impl Default for CounterConfig {
    fn default() -> Self {
        Self {
            duration: Duration::from_secs(1),
            clock: CounterClock::RealTime,
            platform_threads: 2,
        }
    }
}

/// Platform rate as completed intervals over elapsed time: `n`
/// increments span `n - 1` enforced gaps. Virtual mode uses the logical
/// clock, so the result is exact.
fn platform_rate(cfg: &CounterConfig) -> CounterRow {
    let counter = Arc::new(PlatformCounter::in_memory(cfg.clock, DEFAULT_MIN_INCREMENT_INTERVAL));
    let (n, secs) = match cfg.clock {
        CounterClock::Virtual => {
            let target = (cfg.duration.as_secs_f64() / DEFAULT_MIN_INCREMENT_INTERVAL.as_secs_f64()).ceil() as u64 + 1;
            for _ in 0..target {
                counter.increment().expect("in-memory counter");
            }
            (counter.read(), counter.virtual_elapsed().as_secs_f64())
        }
        CounterClock::RealTime => {
            let start = Instant::now();
            let deadline = start + cfg.duration;
            let workers: Vec<_> = (0..cfg.platform_threads.max(1))
                .map(|_| {
                    let counter = counter.clone();
                    std::thread::spawn(move || {
                        while Instant::now() < deadline {
                            counter.increment().expect("in-memory counter");
                        }
                    })
                })
                .collect();
            for w in workers {
                let _ = w.join();
            }
            (counter.read(), start.elapsed().as_secs_f64())
        }
    };
    CounterRow {
        variant: CounterVariant::Platform,
        increments: n,
        seconds: secs,
        per_second: n.saturating_sub(1) as f64 / secs,
    }
}

fn timed(variant: CounterVariant, duration: Duration, mut step: impl FnMut() -> u64) -> CounterRow {
    let start = Instant::now();
    let mut n = 0u64;
    while start.elapsed() < duration {
        for _ in 0..64 {
            step();
            n += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    CounterRow {
        variant,
        increments: n,
        seconds: secs,
        per_second: n as f64 / secs,
    }
}

const COUNTER_CODE: &[u8] = b"bench-counter-app";

/// In-process service hosting a counter application policy.
struct CounterHost {
    service: TrustService,
    platform: Platform,
    qa: QuotingAuthority,
    entropy: SharedEntropy,
}

impl CounterHost {
    fn new(strict: bool) -> Self {
        let entropy: SharedEntropy = Arc::new(OsEntropy);
        let platform = Platform::generate(entropy.as_ref());
        let qa = QuotingAuthority::generate(entropy.clone());
        qa.register_platform(platform.id());
        let counter = Arc::new(PlatformCounter::in_memory(CounterClock::Virtual, DEFAULT_MIN_INCREMENT_INTERVAL));
        let service = TrustService::start(
            &platform,
            &qa,
            counter,
            ServiceOptions::new(Storage::Memory, Arc::new(warden_core::approval::NoApprovers), entropy.clone()),
        )
        .expect("in-memory service");
        let doc = parse_policy(&format!(
            "name: bench\nservices:\n  - name: counter\n    command: app\n    mrenclaves: [\"{}\"]\n    strict: {strict}\nvolumes:\n  - name: data\n",
            measure(COUNTER_CODE)
        ))
        .expect("bench policy");
        let owner = SigningKeyPair::generate(entropy.as_ref());
        service.create_policy(&owner.public_key(), doc).expect("policy");
        Self {
            service,
            platform,
            qa,
            entropy,
        }
    }

    fn start(&self, dir: &Path) -> ApplicationContext {
        let opts = RuntimeOptions {
            policy: "bench".into(),
            service: "counter".into(),
            code: COUNTER_CODE.to_vec(),
            volume_dirs: [("data".to_string(), dir.to_path_buf())].into(),
        };
        startup(&opts, self.platform.id(), &self.qa, &self.service, self.entropy.as_ref()).expect("counter app startup")
    }
}

fn shielded_rate(strict: bool, dir: &Path, duration: Duration) -> CounterRow {
    let host = CounterHost::new(strict);
    let ctx = host.start(dir);
    let variant = if strict {
        CounterVariant::FileShieldedStrict
    } else {
        CounterVariant::FileShielded
    };
    let row = timed(variant, duration, || ctx.counter_increment("/data/counter").expect("increment"));
    ctx.exit().expect("clean exit");
    row
}

/// Measures the four counter variants; `dir` holds the counter files.
pub fn bench_counters(cfg: &CounterConfig, dir: &Path) -> std::io::Result<CounterRates> {
    let platform = platform_rate(cfg);
    let native_path = dir.join("native-counter");
    std::fs::create_dir_all(dir)?;
    std::fs::write(&native_path, 0u64.to_be_bytes())?;
    let native = timed(CounterVariant::FileNative, cfg.duration, || {
        let raw = std::fs::read(&native_path).expect("read counter");
        let v = u64::from_be_bytes(raw[..8].try_into().expect("8 bytes")) + 1;
        std::fs::write(&native_path, v.to_be_bytes()).expect("write counter");
        v
    });
    let shielded = shielded_rate(false, &dir.join("shielded"), cfg.duration);
    let strict = shielded_rate(true, &dir.join("strict"), cfg.duration);
    Ok(CounterRates {
        rows: vec![platform, native, shielded, strict],
    })
}

// ------------------------------------------------------------- attestation

#[derive(Debug, Clone, Serialize)]
pub struct AttestationSample {
    pub variant: String,
    pub init_ms: f64,
    pub handshake_ms: f64,
    pub attest_ms: f64,
    pub admit_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputRow {
    pub variant: String,
    pub parallelism: usize,
    pub sessions: u64,
    pub seconds: f64,
    pub per_second: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttestationBench {
    pub samples: Vec<AttestationSample>,
    pub throughput: Vec<ThroughputRow>,
}

impl AttestationBench {
    pub fn total(&self, variant: &str) -> Summary {
        let t: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.variant == variant)
            .map(|s| s.total_ms)
            .collect();
        summarize(&t)
    }
}

#[derive(Debug, Clone)]
pub struct AttestationConfig {
    /// Sequential sessions per latency variant.
    pub samples: usize,
    /// Delay added to each request in the remote variant.
    pub remote_delay: Duration,
    pub parallelism: Vec<usize>,
    /// Sessions per worker in the throughput sweep.
    pub sessions_per_worker: usize,
}

impl Default for AttestationConfig {
    fn default() -> Self {
        Self {
            samples: 20,
            remote_delay: Duration::from_millis(250),
            parallelism: vec![1, 2, 4, 8],
            sessions_per_worker: 20,
        }
    }
}

const ATTEST_CODE: &[u8] = b"bench-attested-app";

struct AttestHost {
    _server: crate::ServerHandle,
    addr: String,
    server_key: warden_core::crypto::PublicKey,
    platform: Platform,
    qa: QuotingAuthority,
}

impl AttestHost {
    fn new() -> anyhow::Result<Self> {
        let entropy: SharedEntropy = Arc::new(OsEntropy);
        let platform = Platform::generate(entropy.as_ref());
        let qa = QuotingAuthority::generate(entropy.clone());
        qa.register_platform(platform.id());
        let counter = Arc::new(PlatformCounter::in_memory(CounterClock::Virtual, DEFAULT_MIN_INCREMENT_INTERVAL));
        let service = TrustService::start(
            &platform,
            &qa,
            counter,
            ServiceOptions::new(Storage::Memory, Arc::new(warden_core::approval::NoApprovers), entropy.clone()),
        )?;
        let mut yaml = String::from("name: attest\nservices:\n");
        for i in 0..64 {
            yaml += &format!("  - name: s{i}\n    command: app\n    mrenclaves: [\"{}\"]\n", measure(ATTEST_CODE));
        }
        yaml += "secrets:\n  - name: k\n    kind: generated\n    size: 16\n";
        let owner = SigningKeyPair::generate(entropy.as_ref());
        service.create_policy(&owner.public_key(), parse_policy(&yaml)?)?;
        let server = serve_service(TcpListener::bind("127.0.0.1:0")?, service.clone(), 4)?;
        Ok(Self {
            addr: server.addr().to_string(),
            _server: server,
            server_key: service.identity().public_key(),
            platform,
            qa,
        })
    }

    /// One application start: key and quote, TLS handshake, attest, admit.
    fn session(&self, service: &str, delay: Duration, variant: &str) -> anyhow::Result<AttestationSample> {
        let t0 = Instant::now();
        let channel = SigningKeyPair::generate(&OsEntropy);
        let report = self.qa.issue_report(self.platform.id(), measure(ATTEST_CODE), channel.public_key())?;
        let client = HttpsClient::for_key(self.addr.clone(), &channel, ServerTrust::Pinned(self.server_key))?.with_rtt(delay);
        let t1 = Instant::now();
        client.connect()?;
        let t2 = Instant::now();
        let cfg = client.attest(&report, "attest", service)?;
        let t3 = Instant::now();
        client.admit(&cfg.session, &BTreeMap::new())?;
        let t4 = Instant::now();
        Ok(AttestationSample {
            variant: variant.into(),
            init_ms: ms(t1 - t0),
            handshake_ms: ms(t2 - t1),
            attest_ms: ms(t3 - t2),
            admit_ms: ms(t4 - t3),
            total_ms: ms(t4 - t0),
        })
    }
}

/// Latency of local versus delayed attestation and startup throughput
/// under increasing parallelism.
pub fn bench_attestation(cfg: &AttestationConfig) -> anyhow::Result<AttestationBench> {
    let host = Arc::new(AttestHost::new()?);
    let mut samples = Vec::new();
    host.session("s0", Duration::ZERO, "warmup")?;
    for (variant, delay) in [("local", Duration::ZERO), ("remote", cfg.remote_delay)] {
        for _ in 0..cfg.samples {
            samples.push(host.session("s0", delay, variant)?);
        }
    }
    let mut throughput = Vec::new();
    for &p in &cfg.parallelism {
        let start = Instant::now();
        let done = Arc::new(AtomicU64::new(0));
        let workers: Vec<_> = (0..p)
            .map(|w| {
                let host = host.clone();
                let done = done.clone();
                let n = cfg.sessions_per_worker;
                std::thread::spawn(move || -> anyhow::Result<()> {
                    let svc = format!("s{}", w % 64);
                    for _ in 0..n {
                        host.session(&svc, Duration::ZERO, "throughput")?;
                        done.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(())
                })
            })
            .collect();
        for w in workers {
            w.join().map_err(|_| anyhow::anyhow!("worker panicked"))??;
        }
        let secs = start.elapsed().as_secs_f64();
        let sessions = done.load(Ordering::Relaxed);
        throughput.push(ThroughputRow {
            variant: "local".into(),
            parallelism: p,
            sessions,
            seconds: secs,
            per_second: sessions as f64 / secs,
        });
    }
    Ok(AttestationBench { samples, throughput })
}

// ---------------------------------------------------------------- approval

#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    pub channel: String,
    pub offered_per_second: f64,
    pub achieved_per_second: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub errors: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RttRow {
    pub rtt_ms: f64,
    pub mean_ms: f64,
    pub ci95_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApprovalBench {
    /// Closed-loop maximum of the mutual-TLS endpoint.
    pub capacity_per_second: f64,
    pub rates: Vec<RateRow>,
    pub rtt: Vec<RttRow>,
    /// Offered rate past which latency spiked; `None` if no knee was seen.
    pub knee_per_second: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ApprovalConfig {
    pub workers: usize,
    /// Duration of each offered-rate step.
    pub step: Duration,
    /// Offered rates as multiples of the measured capacity.
    pub load_factors: Vec<f64>,
    pub rtts: Vec<Duration>,
    pub rtt_samples: usize,
}

impl Default for ApprovalConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            step: Duration::from_millis(800),
            load_factors: vec![0.1, 0.25, 0.5, 0.75, 1.5, 2.0, 3.0],
            rtts: [0u64, 5, 10, 20, 40].iter().map(|&m| Duration::from_millis(m)).collect(),
            rtt_samples: 10,
        }
    }
}

type VoteFn = Arc<dyn Fn(&ApprovalRequest) -> bool + Send + Sync>;

fn request(entropy: &dyn EntropySource, i: u64) -> ApprovalRequest {
    ApprovalRequest {
        policy: "bench".into(),
        change_digest: hash(&i.to_be_bytes()),
        nonce: ApprovalNonce::random(entropy),
        summary: String::new(),
    }
}

/// Back-to-back requests from `workers` threads for `duration`.
fn closed_loop(voters: &[VoteFn], duration: Duration) -> f64 {
    let done = Arc::new(AtomicU64::new(0));
    let start = Instant::now();
    let threads: Vec<_> = voters
        .iter()
        .cloned()
        .map(|vote| {
            let done = done.clone();
            std::thread::spawn(move || {
                let e = OsEntropy;
                let mut i = 0;
                while start.elapsed() < duration {
                    if vote(&request(&e, i)) {
                        done.fetch_add(1, Ordering::Relaxed);
                    }
                    i += 1;
                }
            })
        })
        .collect();
    for t in threads {
        let _ = t.join();
    }
    done.load(Ordering::Relaxed) as f64 / start.elapsed().as_secs_f64()
}

/// Open-loop load at `rate`: request `i` is due at `i / rate`; latency is
/// measured from the due time, so queueing delay is included.
fn open_loop(channel: &str, voters: &[VoteFn], rate: f64, duration: Duration) -> RateRow {
    let next = Arc::new(AtomicU64::new(0));
    let errors = Arc::new(AtomicU64::new(0));
    let lat = Arc::new(Mutex::new(Vec::new()));
    let total = (rate * duration.as_secs_f64()).ceil().max(1.0) as u64;
    let start = Instant::now();
    let threads: Vec<_> = voters
        .iter()
        .cloned()
        .map(|vote| {
            let (next, errors, lat) = (next.clone(), errors.clone(), lat.clone());
            std::thread::spawn(move || {
                let e = OsEntropy;
                let mut mine = Vec::new();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= total {
                        break;
                    }
                    let due = start + Duration::from_secs_f64(i as f64 / rate);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                    if vote(&request(&e, i)) {
                        mine.push(ms(due.elapsed()));
                    } else {
                        errors.fetch_add(1, Ordering::Relaxed);
                    }
                }
                lat.lock().expect("latencies").extend(mine);
            })
        })
        .collect();
    for t in threads {
        let _ = t.join();
    }
    let secs = start.elapsed().as_secs_f64();
    let lat = lat.lock().expect("latencies").clone();
    RateRow {
        channel: channel.into(),
        offered_per_second: rate,
        achieved_per_second: lat.len() as f64 / secs,
        mean_ms: summarize(&lat).mean,
        p50_ms: percentile(&lat, 0.5),
        p99_ms: percentile(&lat, 0.99),
        errors: errors.load(Ordering::Relaxed),
    }
}

/// First offered rate whose mean latency exceeds five times the lowest-load
/// latency while throughput falls short of the offered rate.
pub fn find_knee(rows: &[RateRow]) -> Option<f64> {
    let base = rows.first()?.mean_ms.max(0.05);
    rows.iter()
        .find(|r| r.mean_ms > 5.0 * base && r.achieved_per_second < 0.9 * r.offered_per_second)
        .map(|r| r.offered_per_second)
}

/// True if each value is at least the previous one minus `slack`.
pub fn nondecreasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - slack)
}

/// Rate sweep against a local approval daemon, with and without the
/// secure channel, and latency versus injected round-trip time.
pub fn bench_approval(cfg: &ApprovalConfig) -> anyhow::Result<ApprovalBench> {
    let entropy: SharedEntropy = Arc::new(SeededEntropy::new(0x5eed));
    let key = SigningKeyPair::generate(entropy.as_ref());
    let svc = Arc::new(ApprovalService::new("bench", key.clone(), Box::new(StaticRule::ApproveAll)));
    let daemon = serve_daemon(TcpListener::bind("127.0.0.1:0")?, svc.clone(), &key, entropy.as_ref(), 2)?;
    let addr = daemon.addr().to_string();
    let pin = key.public_key();

    let tls_voter = |rtt: Duration| -> anyhow::Result<VoteFn> {
        let me = SigningKeyPair::generate(&OsEntropy);
        let c = HttpsClient::for_key(addr.clone(), &me, ServerTrust::Pinned(pin))?.with_rtt(rtt);
        c.connect()?;
        Ok(Arc::new(move |req: &ApprovalRequest| {
            c.send::<_, SignedVote>(Method::POST, "/approve", req).is_ok()
        }))
    };
    let tls: Vec<VoteFn> = (0..cfg.workers).map(|_| tls_voter(Duration::ZERO)).collect::<Result<_, _>>()?;
    let direct: Vec<VoteFn> = (0..cfg.workers)
        .map(|_| {
            let svc = svc.clone();
            Arc::new(move |req: &ApprovalRequest| svc.handle_approval(req).is_ok()) as VoteFn
        })
        .collect();

    let capacity = closed_loop(&tls, cfg.step);
    let direct_capacity = closed_loop(&direct, cfg.step);
    let mut rates = Vec::new();
    for &f in &cfg.load_factors {
        rates.push(open_loop("mtls", &tls, f * capacity, cfg.step));
    }
    for &f in &cfg.load_factors {
        rates.push(open_loop("direct", &direct, f * direct_capacity, cfg.step));
    }
    let knee = find_knee(&rates.iter().filter(|r| r.channel == "mtls").cloned().collect::<Vec<_>>());

    let mut rtt = Vec::new();
    for &d in &cfg.rtts {
        let vote = tls_voter(d)?;
        let mut lat = Vec::new();
        for i in 0..cfg.rtt_samples {
            let t = Instant::now();
            vote(&request(&OsEntropy, i as u64));
            lat.push(ms(t.elapsed()));
        }
        let s = summarize(&lat);
        rtt.push(RttRow {
            rtt_ms: ms(d),
            mean_ms: s.mean,
            ci95_ms: s.ci95,
        });
    }
    Ok(ApprovalBench {
        capacity_per_second: capacity,
        rates,
        rtt,
        knee_per_second: knee,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_matches_hand_computation() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 0.5), 3.0);
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 0.99), 5.0);
    }

    #[test]
    fn knee_detection() {
        let row = |offered: f64, achieved: f64, mean: f64| RateRow {
            channel: "t".into(),
            offered_per_second: offered,
            achieved_per_second: achieved,
            mean_ms: mean,
            p50_ms: mean,
            p99_ms: mean,
            errors: 0,
        };
        let rows = [row(10.0, 10.0, 1.0), row(100.0, 99.0, 1.2), row(200.0, 120.0, 80.0)];
        assert_eq!(find_knee(&rows), Some(200.0));
        assert_eq!(find_knee(&rows[..2]), None);
    }

    #[test]
    fn virtual_platform_rate_is_exact() {
        let cfg = CounterConfig {
            duration: Duration::from_secs(2),
            clock: CounterClock::Virtual,
            platform_threads: 3,
        };
        let row = platform_rate(&cfg);
        assert!((row.per_second - 20.0).abs() < 1e-9, "{row:?}");
    }
}
