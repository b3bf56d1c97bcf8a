//! `warden`: operator and developer command line for the trust service.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use warden_core::approval::ApprovalService;
use warden_core::attestation::ClientTrust;
use warden_core::crypto::{os_entropy, OsEntropy, PublicKey, SigningKeyPair};
use warden_core::rollback::GuardError;
use warden_core::runtime::{demo, startup, ClientError, RuntimeError, RuntimeOptions, EXIT_UNACKED_TAG, POLICY_ENV, SERVICE_ENV};
use warden_core::service::{
    override_unclean_shutdown, service_measurement, ChangeId, ChangeStatus, ChangeView, ServiceError, ServiceOptions, Storage, TrustService,
    ROOT_VOLUME,
};
use warden_core::tee::{measure, CounterClock, Measurement, Platform, PlatformCounter, QuotingAuthority, DEFAULT_MIN_INCREMENT_INTERVAL};
use warden_server::api::serve_service;
use warden_server::approval::{load_key, save_key, serve_daemon, DaemonConfig, HttpApprovers};
use warden_server::bench::{self, ApprovalConfig, AttestationConfig, CounterConfig};
use warden_server::tls::ServerTrust;
use warden_server::{attest_instance, HttpsClient, RemoteConnector};

const EXIT_FAILURE: i32 = 1;
const EXIT_TRANSPORT: i32 = 6;
const EXIT_REFUSED: i32 = 7;
const EXIT_CHANGE_REJECTED: i32 = 8;
const EXIT_CHANGE_PENDING: i32 = 9;
const EXIT_UNTRUSTED: i32 = 10;
const EXIT_FRESHNESS: i32 = 11;

const DEFAULT_ADDR: &str = "127.0.0.1:7443";
const DEMO_COUNTER_CODE: &[u8] = b"warden demo counter app v1";
const DEMO_INFERENCE_CODE: &[u8] = b"warden demo inference app v1";

#[derive(Parser)]
#[command(name = "warden", version, about = "Operate a warden trust service and its applications")]
struct Cli {
    /// YAML file with defaults for the global options below.
    #[arg(long, global = true, env = "WARDEN_CONFIG")]
    config: Option<PathBuf>,
    /// Service address, host:port.
    #[arg(long, global = true, env = "WARDEN_ADDR")]
    addr: Option<String>,
    /// Directory holding platform.json, qa.json, counter and owner.key.
    #[arg(long, global = true, env = "WARDEN_PLATFORM_DIR")]
    platform_dir: Option<PathBuf>,
    /// Owner key file (hex Ed25519 secret); created when missing.
    #[arg(long, global = true, env = "WARDEN_KEY")]
    key: Option<PathBuf>,
    /// Pin the service's TLS key instead of attesting it.
    #[arg(long, global = true, env = "WARDEN_SERVICE_KEY")]
    service_key: Option<PublicKey>,
    /// Trust services holding an instance certificate from this CA root.
    #[arg(long, global = true, env = "WARDEN_CA_ROOT")]
    ca_root: Option<PublicKey>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, inspect, update and delete policies.
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Verify that the service runs the expected code on a trusted platform.
    AttestInstance {
        /// Permitted service measurement (repeatable); defaults to the built-in one.
        #[arg(long = "mre")]
        mres: Vec<Measurement>,
        /// Quoting authority key; defaults to the one in the platform directory.
        #[arg(long)]
        quoting_authority: Option<PublicKey>,
    },
    /// Run a demo application against the service.
    RunDemo(RunDemo),
    /// Accept the current counter after an unclean shutdown of a stopped service.
    OverrideUncleanShutdown {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reason: String,
        /// Required; the override discards rollback evidence.
        #[arg(long)]
        confirm: bool,
    },
    /// Micro-benchmarks; rows are written as CSV.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run the trust service until interrupted.
    Serve {
        #[arg(long, default_value = DEFAULT_ADDR)]
        listen: String,
        /// Service state directory; omitted means in-memory state.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Run a board member's approval endpoint until interrupted.
    ApprovalDaemon {
        /// YAML file with member, key, rule and listen.
        daemon_config: PathBuf,
        /// Create the key file when missing.
        #[arg(long)]
        init_key: bool,
    },
    /// Print the measurement of a code file or a built-in demo.
    Measure {
        #[arg(long, conflicts_with = "file")]
        demo: Option<DemoKind>,
        file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    Create {
        #[arg(short = 'f', long)]
        file: PathBuf,
        #[command(flatten)]
        wait: Wait,
    },
    Show {
        name: String,
    },
    Update {
        #[arg(short = 'f', long)]
        file: PathBuf,
        #[command(flatten)]
        wait: Wait,
    },
    Delete {
        name: String,
        #[command(flatten)]
        wait: Wait,
    },
    /// Status of a change, optionally waiting for the board.
    ApproveStatus {
        id: ChangeId,
        #[command(flatten)]
        wait: Wait,
    },
    /// Request release of a policy's secrets and volume keys.
    Secrets {
        name: String,
        #[command(flatten)]
        wait: Wait,
    },
    /// Expected volume tags of a policy.
    Tags {
        name: String,
    },
}

#[derive(Args, Clone, Copy)]
struct Wait {
    /// Seconds to wait for board decisions.
    #[arg(long, default_value_t = 30)]
    wait: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoKind {
    Counter,
    Inference,
}

#[derive(Args)]
struct RunDemo {
    kind: DemoKind,
    #[arg(long, env = POLICY_ENV)]
    policy: String,
    /// Service entry within the policy.
    #[arg(long = "app-service", env = SERVICE_ENV)]
    app_service: String,
    /// Host directory of a volume, NAME=DIR (repeatable); `@root` for the image.
    #[arg(long = "volume", value_parser = parse_volume)]
    volumes: Vec<(String, PathBuf)>,
    /// Code bundle to measure instead of the built-in one.
    #[arg(long)]
    code: Option<PathBuf>,
    /// Counter: increments to perform.
    #[arg(long, default_value_t = 100)]
    count: u64,
    /// Counter: file path inside the application.
    #[arg(long, default_value = "/data/counter")]
    path: String,
    /// Inference: model, input and output paths inside the application.
    #[arg(long, default_value = "/app/model.bin")]
    model: String,
    #[arg(long, default_value = "/app/input.bin")]
    input: String,
    #[arg(long, default_value = "/data/output.txt")]
    output: String,
}

#[derive(Subcommand)]
enum BenchCmd {
    Counters {
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        /// Deterministic virtual clock for the platform counter.
        #[arg(long)]
        virtual_clock: bool,
        /// Directory for counter files; defaults to a temporary directory.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    Attestation {
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 250)]
        remote_delay_ms: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
        parallelism: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    Approval {
        #[arg(long, default_value_t = 800)]
        step_ms: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 5, 10, 20, 40])]
        rtt_ms: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_volume(s: &str) -> Result<(String, PathBuf), String> {
    let (name, dir) = s.split_once('=').ok_or("expected NAME=DIR")?;
    Ok((name.to_string(), PathBuf::from(dir)))
}

/// Defaults read from `--config`; command-line and environment win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    addr: Option<String>,
    platform_dir: Option<PathBuf>,
    key: Option<PathBuf>,
    service_key: Option<PublicKey>,
    ca_root: Option<PublicKey>,
}

struct Settings {
    addr: String,
    platform_dir: PathBuf,
    key: PathBuf,
    service_key: Option<PublicKey>,
    ca_root: Option<PublicKey>,
    json: bool,
}

impl Settings {
    fn resolve(cli: &Cli) -> anyhow::Result<Self> {
        let mut file = FileConfig::default();
        if let Some(path) = &cli.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            file = serde_yaml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut file.platform_dir, &mut file.key].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        let platform_dir = cli.platform_dir.clone().or(file.platform_dir).unwrap_or_else(|| PathBuf::from(".warden"));
        Ok(Self {
            addr: cli.addr.clone().or(file.addr).unwrap_or_else(|| DEFAULT_ADDR.into()),
            key: cli.key.clone().or(file.key).unwrap_or_else(|| platform_dir.join("owner.key")),
            platform_dir,
            service_key: cli.service_key.or(file.service_key),
            ca_root: cli.ca_root.or(file.ca_root),
            json: cli.json,
        })
    }

    fn ensure_dir(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.platform_dir).with_context(|| format!("creating {}", self.platform_dir.display()))
    }

    fn platform(&self) -> anyhow::Result<Platform> {
        self.ensure_dir()?;
        Ok(Platform::load_or_create(&self.platform_dir.join("platform.json"), &OsEntropy)?)
    }

    /// The simulated quoting authority, with this host's platform registered.
    fn quoting(&self, platform: &Platform) -> anyhow::Result<QuotingAuthority> {
        self.ensure_dir()?;
        let path = self.platform_dir.join("qa.json");
        let qa = QuotingAuthority::load_or_create(&path, os_entropy())?;
        if !qa.is_registered(&platform.id()) {
            qa.register_platform(platform.id());
            qa.save(&path)?;
        }
        Ok(qa)
    }

    fn counter(&self) -> anyhow::Result<PlatformCounter> {
        self.ensure_dir()?;
        Ok(PlatformCounter::open(
            self.platform_dir.join("counter"),
            CounterClock::RealTime,
            DEFAULT_MIN_INCREMENT_INTERVAL,
        )?)
    }

    fn owner_key(&self) -> anyhow::Result<SigningKeyPair> {
        if self.key.exists() {
            return load_key(&self.key).with_context(|| format!("loading {}", self.key.display()));
        }
        if let Some(dir) = self.key.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let key = SigningKeyPair::generate(&OsEntropy);
        save_key(&self.key, &key)?;
        Ok(key)
    }

    /// How to trust the service: pinned key, CA root, or attestation
    /// against the local quoting authority.
    fn service_trust(&self) -> anyhow::Result<PublicKey> {
        if let Some(k) = self.service_key {
            return Ok(k);
        }
        let trust = match self.ca_root {
            Some(root) => ClientTrust::CaRoot(root),
            None => {
                let platform = self.platform()?;
                ClientTrust::Explicit {
                    quoting_authority: self.quoting(&platform)?.public_key(),
                    permitted: BTreeSet::from([service_measurement()]),
                }
            }
        };
        let verdict = attest_instance(&self.addr, &SigningKeyPair::generate(&OsEntropy), &trust)?;
        match (verdict.valid, verdict.instance_key) {
            (true, Some(k)) => Ok(k),
            _ => Err(Exit::new(EXIT_UNTRUSTED, format!("service not trusted: {}", verdict.reason)).into()),
        }
    }

    fn client(&self) -> anyhow::Result<HttpsClient> {
        let server = self.service_trust()?;
        Ok(HttpsClient::for_key(&self.addr, &self.owner_key()?, ServerTrust::Pinned(server))?)
    }

    fn emit(&self, value: &impl Serialize, human: impl FnOnce() -> String) -> anyhow::Result<()> {
        let mut out = std::io::stdout().lock();
        if self.json {
            serde_json::to_writer(&mut out, value)?;
            writeln!(out)?;
        } else {
            writeln!(out, "{}", human())?;
        }
        Ok(())
    }
}

/// Failure with a specific process exit status.
#[derive(Debug)]
struct Exit {
    code: i32,
    message: String,
}

impl Exit {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn client_code(e: &ClientError) -> i32 {
    match e {
        ClientError::Transport(_) => EXIT_TRANSPORT,
        ClientError::Refused(r) if r.code == "freshness-violation" => EXIT_FRESHNESS,
        ClientError::Refused(_) => EXIT_REFUSED,
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<GuardError>() {
            return e.exit_code();
        }
        if let Some(ServiceError::Guard(g)) = cause.downcast_ref::<ServiceError>() {
            return g.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<RuntimeError>() {
            return match e {
                _ if e.is_freshness() => EXIT_FRESHNESS,
                RuntimeError::Service(c) => client_code(c),
                RuntimeError::Push(_) => EXIT_UNACKED_TAG,
                _ => EXIT_FAILURE,
            };
        }
        if let Some(e) = cause.downcast_ref::<ClientError>() {
            return client_code(e);
        }
    }
    EXIT_FAILURE
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let s = Settings::resolve(&cli)?;
    match cli.command {
        Command::Policy(cmd) => policy(&s, cmd),
        Command::AttestInstance { mres, quoting_authority } => attest(&s, mres, quoting_authority),
        Command::RunDemo(args) => run_demo(&s, args),
        Command::OverrideUncleanShutdown { data, reason, confirm } => {
            let platform = s.platform()?;
            let counter = s.counter()?;
            let version = override_unclean_shutdown(&data, &platform, &counter, confirm, &reason, os_entropy())?;
            s.emit(&json!({ "version": version }), || format!("database version set to counter value {version}"))
        }
        Command::Bench(cmd) => run_bench(&s, cmd),
        Command::Serve { listen, data, workers } => serve(&s, &listen, data, workers),
        Command::ApprovalDaemon { daemon_config, init_key } => approval_daemon(&s, &daemon_config, init_key),
        Command::Measure { demo, file } => {
            let code = match (demo, file) {
                (Some(kind), _) => demo_code(kind).to_vec(),
                (None, Some(f)) => std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?,
                (None, None) => return Err(anyhow!("give a file or --demo")),
            };
            let mre = measure(&code);
            s.emit(&json!({ "mre": mre }), || mre.to_string())
        }
    }
}

fn finish_change(s: &Settings, view: ChangeView) -> anyhow::Result<()> {
    let status = view.status;
    s.emit(&view, || {
        let mut line = format!("change {} ({:?} {}): {:?}", view.id, view.action, view.policy, view.status);
        if let Some(r) = &view.reason {
            line.push_str(&format!(" - {r}"));
        }
        line
    })?;
    match status {
        ChangeStatus::Applied => Ok(()),
        ChangeStatus::Pending => Err(Exit::new(EXIT_CHANGE_PENDING, "change still awaiting board decisions").into()),
        ChangeStatus::Rejected | ChangeStatus::Failed => Err(Exit::new(EXIT_CHANGE_REJECTED, format!("change {status:?}")).into()),
    }
}

fn settle(client: &HttpsClient, view: ChangeView, wait: Wait) -> anyhow::Result<ChangeView> {
    if view.status != ChangeStatus::Pending || wait.wait == 0 {
        return Ok(view);
    }
    Ok(client.change(&view.id, Some(Duration::from_secs(wait.wait)))?)
}

fn policy_text(file: &Path) -> anyhow::Result<(String, String)> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let doc = warden_core::policy::parse_policy(&text).with_context(|| format!("parsing {}", file.display()))?;
    Ok((doc.name, text))
}

fn policy(s: &Settings, cmd: PolicyCmd) -> anyhow::Result<()> {
    let client = s.client()?;
    match cmd {
        PolicyCmd::Create { file, wait } => {
            let (name, text) = policy_text(&file)?;
            let view = client.create_policy(&name, &text)?;
            finish_change(s, settle(&client, view, wait)?)
        }
        PolicyCmd::Update { file, wait } => {
            let (name, text) = policy_text(&file)?;
            let view = client.update_policy(&name, &text)?;
            finish_change(s, settle(&client, view, wait)?)
        }
        PolicyCmd::Delete { name, wait } => {
            let view = client.delete_policy(&name)?;
            finish_change(s, settle(&client, view, wait)?)
        }
        PolicyCmd::ApproveStatus { id, wait } => {
            let view = client.change(&id, (wait.wait > 0).then(|| Duration::from_secs(wait.wait)))?;
            finish_change(s, view)
        }
        PolicyCmd::Show { name } => {
            let view = client.get_policy(&name)?;
            if s.json {
                s.emit(&view, String::new)
            } else {
                println!("# revision {}, owner {}", view.revision, view.owner);
                print!("{}", serde_yaml::to_string(&view.policy)?);
                Ok(())
            }
        }
        PolicyCmd::Secrets { name, wait } => {
            let view = settle(&client, client.request_secrets(&name)?, wait)?;
            if view.status != ChangeStatus::Applied {
                return finish_change(s, view);
            }
            let released = client.released_secrets(&view.id)?;
            s.emit(&released, || {
                released.secrets.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("\n")
            })
        }
        PolicyCmd::Tags { name } => {
            let tags = client.policy_tags(&name)?;
            s.emit(&tags, || {
                tags.iter()
                    .map(|t| format!("{} {}", t.volume, t.expected))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
        }
    }
}

fn attest(s: &Settings, mres: Vec<Measurement>, qa: Option<PublicKey>) -> anyhow::Result<()> {
    let trust = match (s.ca_root, qa) {
        (Some(root), None) => ClientTrust::CaRoot(root),
        (_, qa) => {
            let quoting_authority = match qa {
                Some(k) => k,
                None => s.quoting(&s.platform()?)?.public_key(),
            };
            let permitted = if mres.is_empty() {
                BTreeSet::from([service_measurement()])
            } else {
                mres.into_iter().collect()
            };
            ClientTrust::Explicit { quoting_authority, permitted }
        }
    };
    let verdict = attest_instance(&s.addr, &s.owner_key()?, &trust)?;
    s.emit(&verdict, || match (&verdict.instance_key, &verdict.mre) {
        (Some(k), Some(m)) if verdict.valid => format!("trusted: instance key {k}, measurement {m}"),
        _ => format!("NOT trusted: {}", verdict.reason),
    })?;
    if verdict.valid {
        Ok(())
    } else {
        Err(Exit::new(EXIT_UNTRUSTED, verdict.reason).into())
    }
}

fn demo_code(kind: DemoKind) -> &'static [u8] {
    match kind {
        DemoKind::Counter => DEMO_COUNTER_CODE,
        DemoKind::Inference => DEMO_INFERENCE_CODE,
    }
}

fn run_demo(s: &Settings, a: RunDemo) -> anyhow::Result<()> {
    let code = match &a.code {
        Some(f) => std::fs::read(f).with_context(|| format!("reading {}", f.display()))?,
        None => demo_code(a.kind).to_vec(),
    };
    let opts = RuntimeOptions {
        policy: a.policy.clone(),
        service: a.app_service.clone(),
        code,
        volume_dirs: a.volumes.iter().cloned().collect::<BTreeMap<_, _>>(),
    };
    let platform = s.platform()?;
    let qa = s.quoting(&platform)?;
    let connector = RemoteConnector::new(&s.addr, s.service_trust()?);
    let ctx = startup(&opts, platform.id(), &qa, &connector, &OsEntropy)?;
    match a.kind {
        DemoKind::Counter => {
            let value = demo::counter_app(ctx, &a.path, a.count)?;
            s.emit(&json!({ "counter": value }), || format!("counter = {value}"))
        }
        DemoKind::Inference => {
            if !a.volumes.iter().any(|(n, _)| n == ROOT_VOLUME) {
                return Err(anyhow!("inference needs --volume {ROOT_VOLUME}=DIR"));
            }
            let out = demo::inference_app(ctx, &a.model, &a.input, &a.output)?;
            let text = String::from_utf8_lossy(&out).trim().to_string();
            s.emit(&json!({ "output": text }), || text.clone())
        }
    }
}

fn write_rows<T: Serialize>(path: &Option<PathBuf>, rows: &[T]) -> anyhow::Result<()> {
    match path {
        Some(p) => bench::write_csv(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?, rows)?,
        None => bench::write_csv(std::io::stdout().lock(), rows)?,
    }
    Ok(())
}

fn run_bench(s: &Settings, cmd: BenchCmd) -> anyhow::Result<()> {
    match cmd {
        BenchCmd::Counters {
            seconds,
            virtual_clock,
            dir,
            csv,
        } => {
            let cfg = CounterConfig {
                duration: Duration::from_secs_f64(seconds),
                clock: if virtual_clock { CounterClock::Virtual } else { CounterClock::RealTime },
                ..CounterConfig::default()
            };
            let tmp;
            let dir = match dir {
                Some(d) => d,
                None => {
                    tmp = scratch_dir()?;
                    tmp.path().to_path_buf()
                }
            };
            let rates = bench::bench_counters(&cfg, &dir)?;
            report(s, &csv, &rates.rows, &rates)
        }
        BenchCmd::Attestation {
            samples,
            remote_delay_ms,
            parallelism,
            csv,
        } => {
            let cfg = AttestationConfig {
                samples,
                remote_delay: Duration::from_millis(remote_delay_ms),
                parallelism,
                ..AttestationConfig::default()
            };
            let r = bench::bench_attestation(&cfg)?;
            let summary = json!({
                "local": r.total("local"),
                "remote": r.total("remote"),
                "throughput": r.throughput,
            });
            report(s, &csv, &r.samples, &summary)
        }
        BenchCmd::Approval { step_ms, rtt_ms, csv } => {
            let cfg = ApprovalConfig {
                step: Duration::from_millis(step_ms),
                rtts: rtt_ms.into_iter().map(Duration::from_millis).collect(),
                ..ApprovalConfig::default()
            };
            let r = bench::bench_approval(&cfg)?;
            let summary = json!({
                "capacity_per_second": r.capacity_per_second,
                "knee_per_second": r.knee_per_second,
                "rtt": r.rtt,
            });
            report(s, &csv, &r.rates, &summary)
        }
    }
}

/// Counter files live on tmpfs when available so the page cache, not the
/// disk, bounds the file-based variants.
fn scratch_dir() -> std::io::Result<TempDir> {
    let shm = Path::new("/dev/shm");
    TempDir::new(if shm.is_dir() { shm.to_path_buf() } else { std::env::temp_dir() })
}

/// Rows go to the CSV target; the summary goes to stderr, or to stdout as
/// JSON when `--json` is set and the CSV goes to a file.
fn report<T: Serialize>(s: &Settings, csv: &Option<PathBuf>, rows: &[T], summary: &impl Serialize) -> anyhow::Result<()> {
    write_rows(csv, rows)?;
    if s.json && csv.is_some() {
        s.emit(summary, String::new)
    } else {
        eprintln!("{}", serde_json::to_string_pretty(summary)?);
        Ok(())
    }
}

/// Minimal self-removing directory.
struct TempDir(PathBuf);

impl TempDir {
    fn new(base: PathBuf) -> std::io::Result<Self> {
        let dir = base.join(format!("warden-bench-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Self(dir))
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn wait_for_signal() -> anyhow::Result<()> {
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })?;
    rx.recv()?;
    Ok(())
}

fn serve(s: &Settings, listen: &str, data: Option<PathBuf>, workers: usize) -> anyhow::Result<()> {
    let platform = s.platform()?;
    let qa = s.quoting(&platform)?;
    let counter = Arc::new(s.counter()?);
    let approver_path = s.platform_dir.join("approver.key");
    let approver = if approver_path.exists() {
        load_key(&approver_path)?
    } else {
        let k = SigningKeyPair::generate(&OsEntropy);
        save_key(&approver_path, &k)?;
        k
    };
    let storage = match data {
        Some(d) => Storage::Dir(d),
        None => Storage::Memory,
    };
    let opts = ServiceOptions::new(storage, Arc::new(HttpApprovers::new(approver)), os_entropy());
    let service = TrustService::start(&platform, &qa, counter, opts)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let handle = serve_service(listener, service.clone(), workers)?;
    let key = service.identity().public_key();
    s.emit(
        &json!({ "addr": handle.addr().to_string(), "service_key": key, "mre": service.mre() }),
        || format!("listening on {} (service key {key}, measurement {})", handle.addr(), service.mre()),
    )?;
    wait_for_signal()?;
    handle.stop();
    service.shutdown()?;
    eprintln!("clean shutdown");
    Ok(())
}

fn approval_daemon(s: &Settings, path: &Path, init_key: bool) -> anyhow::Result<()> {
    let cfg = DaemonConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if init_key && !cfg.key.exists() {
        save_key(&cfg.key, &SigningKeyPair::generate(&OsEntropy))?;
    }
    let key = load_key(&cfg.key).with_context(|| format!("loading {}", cfg.key.display()))?;
    let svc = Arc::new(ApprovalService::new(&cfg.member, key.clone(), cfg.rule.build()));
    let listener = TcpListener::bind(&cfg.listen).with_context(|| format!("binding {}", cfg.listen))?;
    let handle = serve_daemon(listener, svc, &key, &OsEntropy, 2)?;
    let url = format!("https://{}/approve", handle.addr());
    s.emit(
        &json!({ "member": cfg.member, "certificate": key.public_key(), "url": url }),
        || format!("member {} approving at {url} (certificate {})", cfg.member, key.public_key()),
    )?;
    wait_for_signal()?;
    handle.stop();
    Ok(())
}
