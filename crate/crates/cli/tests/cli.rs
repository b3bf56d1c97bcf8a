use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;

use serde_json::Value;
use tempfile::TempDir;
use warden_core::crypto::{os_entropy, OsEntropy};
use warden_core::service::{ServiceOptions, Storage, TrustService};
use warden_core::tee::{CounterClock, Platform, PlatformCounter, QuotingAuthority, DEFAULT_MIN_INCREMENT_INTERVAL};
use warden_server::api::serve_service;

const BIN: &str = env!("CARGO_BIN_EXE_warden");

fn cmd(platform: &Path) -> Command {
    let mut c = Command::new(BIN);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("WARDEN_")) {
        c.env_remove(k);
    }
    c.arg("--platform-dir").arg(platform);
    c
}

fn run(platform: &Path, args: &[&str]) -> Output {
    cmd(platform).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit status")
}

/// Long-running subcommand whose first stdout line is a JSON banner.
struct Daemon {
    child: Child,
    banner: Value,
}

impl Daemon {
    fn spawn(platform: &Path, args: &[&str]) -> Self {
        let mut child = cmd(platform)
            .arg("--json")
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        if line.is_empty() {
            let out = child.wait_with_output().unwrap();
            panic!("daemon exited: {}", String::from_utf8_lossy(&out.stderr));
        }
        Self {
            child,
            banner: serde_json::from_str(&line).unwrap(),
        }
    }

    fn str(&self, k: &str) -> String {
        self.banner[k].as_str().unwrap().to_string()
    }

    fn terminate(mut self) -> Output {
        Command::new("kill").arg("-TERM").arg(self.child.id().to_string()).status().unwrap();
        let out = std::mem::replace(&mut self.child, Command::new("true").spawn().unwrap()).wait_with_output().unwrap();
        out
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn approver(dir: &Path, name: &str, rule: &str) -> Daemon {
    let cfg = dir.join(format!("{name}.yaml"));
    std::fs::write(&cfg, format!("member: {name}\nkey: {name}.key\nrule:\n  rule: {rule}\nlisten: 127.0.0.1:0\n")).unwrap();
    Daemon::spawn(dir, &["approval-daemon", cfg.to_str().unwrap(), "--init-key"])
}

fn board_yaml(d: &Daemon, name: &str) -> String {
    format!(
        "board:\n  threshold: 1\n  members:\n    - name: {name}\n      certificate: {}\n      url: {}\n",
        d.str("certificate"),
        d.str("url")
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn mre_of(platform: &Path, demo: &str) -> String {
    json(&run(platform, &["--json", "measure", "--demo", demo]))["mre"].as_str().unwrap().to_string()
}

#[test]
fn measure_is_stable_and_distinguishes_code() {
    let t = TempDir::new().unwrap();
    let a = mre_of(t.path(), "counter");
    assert_eq!(a, mre_of(t.path(), "counter"));
    assert_ne!(a, mre_of(t.path(), "inference"));
    let f = write(t.path(), "code.bin", "warden demo counter app v1");
    let out = run(t.path(), &["measure", f.to_str().unwrap()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), a);
}

#[test]
fn operator_lifecycle_against_served_instance() {
    let t = TempDir::new().unwrap();
    let p = t.path().join("platform");
    let data = t.path().join("service-data");
    let vol = t.path().join("vol");
    let server = Daemon::spawn(&p, &["serve", "--listen", "127.0.0.1:0", "--data", data.to_str().unwrap()]);
    let addr = server.str("addr");
    let alice = approver(t.path(), "alice", "approve-all");

    // Attestation of the instance against the local quoting authority.
    let verdict = json(&run(&p, &["--json", "--addr", &addr, "attest-instance"]));
    assert_eq!(verdict["valid"], true);
    assert_eq!(verdict["instance_key"].as_str().unwrap(), server.str("service_key"));
    let bogus = "00".repeat(32);
    let out = run(&p, &["--addr", &addr, "attest-instance", "--mre", &bogus]);
    assert_eq!(code(&out), 10, "{}", String::from_utf8_lossy(&out.stdout));

    let policy = format!(
        "name: demo\nservices:\n  - name: counter\n    command: run\n    mrenclaves: [\"{}\"]\nvolumes:\n  - name: data\nsecrets:\n  - name: token\n    kind: generated\n    size: 16\n{}",
        mre_of(&p, "counter"),
        board_yaml(&alice, "alice")
    );
    let file = write(t.path(), "demo.yaml", &policy);
    let created = json(&run(&p, &["--json", "--addr", &addr, "policy", "create", "-f", file.to_str().unwrap()]));
    assert_eq!(created["status"], "applied");
    let id = created["id"].as_str().unwrap().to_string();
    let status = json(&run(&p, &["--json", "--addr", &addr, "policy", "approve-status", &id, "--wait", "0"]));
    assert_eq!(status["status"], "applied");

    let shown = json(&run(&p, &["--json", "--addr", &addr, "policy", "show", "demo"]));
    assert_eq!(shown["policy"]["name"], "demo");
    let text = run(&p, &["--addr", &addr, "policy", "show", "demo"]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("name: demo"));

    // The policy name reaches the demo through the environment.
    let vol_arg = format!("data={}", vol.display());
    let out = cmd(&p)
        .env("WARDEN_POLICY", "demo")
        .env("WARDEN_SERVICE", "counter")
        .args(["--json", "--addr", &addr, "run-demo", "counter", "--count", "5", "--volume", &vol_arg])
        .output()
        .unwrap();
    assert_eq!(json(&out)["counter"], 5);
    let out = run(&p, &["--json", "--addr", &addr, "run-demo", "counter", "--policy", "demo", "--app-service", "counter", "--count", "3", "--volume", &vol_arg]);
    assert_eq!(json(&out)["counter"], 8);
    let tags = json(&run(&p, &["--json", "--addr", &addr, "policy", "tags", "demo"]));
    assert_eq!(tags[0]["volume"], "data");

    // Rolling the volume back is refused as a freshness violation.
    let snap = t.path().join("snap");
    std::fs::create_dir_all(&snap).unwrap();
    for e in std::fs::read_dir(&vol).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            std::fs::copy(e.path(), snap.join(e.file_name())).unwrap();
        }
    }
    json(&run(&p, &["--json", "--addr", &addr, "run-demo", "counter", "--policy", "demo", "--app-service", "counter", "--count", "1", "--volume", &vol_arg]));
    for e in std::fs::read_dir(&snap).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), vol.join(e.file_name())).unwrap();
    }
    let out = run(&p, &["--addr", &addr, "run-demo", "counter", "--policy", "demo", "--app-service", "counter", "--volume", &vol_arg]);
    assert_eq!(code(&out), 11, "{}", String::from_utf8_lossy(&out.stderr));

    let secrets = json(&run(&p, &["--json", "--addr", &addr, "policy", "secrets", "demo"]));
    assert_eq!(secrets["secrets"]["token"].as_str().unwrap().len(), 32);

    let deleted = json(&run(&p, &["--json", "--addr", &addr, "policy", "delete", "demo"]));
    assert_eq!(deleted["status"], "applied");
    let out = run(&p, &["--addr", &addr, "policy", "show", "demo"]);
    assert_eq!(code(&out), 7);

    // Clean stop, then restart from the same state.
    let out = server.terminate();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let server = Daemon::spawn(&p, &["serve", "--listen", "127.0.0.1:0", "--data", data.to_str().unwrap()]);
    let addr = server.str("addr");
    json(&run(&p, &["--json", "--addr", &addr, "attest-instance"]));

    // A killed instance leaves v != c; restart is refused until the override.
    drop(server);
    let out = run(&p, &["serve", "--listen", "127.0.0.1:0", "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&p, &["override-unclean-shutdown", "--data", data.to_str().unwrap(), "--reason", "test"]);
    assert_ne!(code(&out), 0);
    let out = run(&p, &["--json", "override-unclean-shutdown", "--data", data.to_str().unwrap(), "--reason", "host crashed", "--confirm"]);
    assert!(json(&out)["version"].as_u64().unwrap() > 0);
    let server = Daemon::spawn(&p, &["serve", "--listen", "127.0.0.1:0", "--data", data.to_str().unwrap()]);
    assert!(server.terminate().status.success());
}

#[test]
fn rejecting_board_and_config_file_against_in_process_service() {
    let t = TempDir::new().unwrap();
    let p = t.path().join("platform");
    let platform = Platform::generate(&OsEntropy);
    let qa = QuotingAuthority::generate(os_entropy());
    qa.register_platform(platform.id());
    let counter = Arc::new(PlatformCounter::in_memory(CounterClock::Virtual, DEFAULT_MIN_INCREMENT_INTERVAL));
    let transport = Arc::new(warden_server::approval::HttpApprovers::new(warden_core::crypto::SigningKeyPair::generate(&OsEntropy)));
    let service = TrustService::start(&platform, &qa, counter, ServiceOptions::new(Storage::Memory, transport, os_entropy())).unwrap();
    let handle = serve_service(std::net::TcpListener::bind("127.0.0.1:0").unwrap(), service.clone(), 2).unwrap();
    let bob = approver(t.path(), "bob", "reject-all");

    // Global options come from the config file; the service key is pinned.
    let cfg = write(
        t.path(),
        "cli.yaml",
        &format!("addr: {}\nservice-key: {}\n", handle.addr(), service.identity().public_key()),
    );
    let policy = write(
        t.path(),
        "p.yaml",
        &format!("name: guarded\nservices:\n  - name: s\n    command: x\n    mrenclaves: [\"{}\"]\n{}", "11".repeat(32), board_yaml(&bob, "bob")),
    );
    let out = cmd(&p)
        .env("WARDEN_CONFIG", &cfg)
        .args(["--json", "policy", "create", "-f", policy.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 8, "{}", String::from_utf8_lossy(&out.stderr));
    let view: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(view["status"], "rejected");
    assert!(service.get_policy(&service.identity().public_key(), "guarded").is_err());

    // Quoting authority of another host: the instance is not trusted.
    let out = run(&p, &["--addr", &handle.addr().to_string(), "attest-instance"]);
    assert_eq!(code(&out), 10);
    let qa_key = qa.public_key().to_string();
    let ok = run(&p, &["--json", "--addr", &handle.addr().to_string(), "attest-instance", "--quoting-authority", &qa_key]);
    assert_eq!(json(&ok)["valid"], true);

    // Nothing listening: transport failure.
    drop(handle);
    let out = cmd(&p).env("WARDEN_CONFIG", &cfg).args(["policy", "show", "guarded"]).output().unwrap();
    assert_eq!(code(&out), 6, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_counters_writes_csv_with_expected_ordering() {
    let t = TempDir::new().unwrap();
    let csv_path = t.path().join("counters.csv");
    let out = run(
        t.path(),
        &["--json", "bench", "counters", "--seconds", "0.3", "--virtual-clock", "--csv", csv_path.to_str().unwrap()],
    );
    let summary = json(&out);
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<(String, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[3].parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["platform", "file-native", "file-shielded", "file-shielded-strict"]);
    assert!((rows[0].1 - 20.0).abs() < 1e-6, "{rows:?}");
    assert!(rows[1..].iter().all(|r| r.1 > rows[0].1), "{rows:?}");
    assert_eq!(summary["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn usage_errors_and_help() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&run(t.path(), &["policy"])), 2);
    let help = run(t.path(), &["--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["policy", "attest-instance", "run-demo", "override-unclean-shutdown", "bench", "serve", "approval-daemon"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn inference_demo_update_and_remaining_benches() {
    use warden_core::crypto::{KeyMaterial, KeyPurpose};
    use warden_core::fs_shield::ShieldedVolume;

    let t = TempDir::new().unwrap();
    let p = t.path().join("platform");
    let server = Daemon::spawn(&p, &["serve", "--listen", "127.0.0.1:0"]);
    let addr = server.str("addr");

    let image_key = KeyMaterial::generate(&OsEntropy);
    let root = t.path().join("image");
    let mut image = ShieldedVolume::create(&root, image_key.to_key(KeyPurpose::FsEncryption)).unwrap();
    image.write_file("app/model.bin", b"weights").unwrap();
    image.write_file("app/input.bin", b"picture").unwrap();
    image.sync().unwrap();
    drop(image);

    let policy = |env: &str| {
        format!(
            "name: lab\nservices:\n  - name: infer\n    command: run\n    environment: {{MODE: {env}}}\n    mrenclaves: [\"{}\"]\n    fspf_key: \"{}\"\nvolumes:\n  - name: data\n",
            mre_of(&p, "inference"),
            hex::encode(image_key.0)
        )
    };
    let file = write(t.path(), "lab.yaml", &policy("a"));
    json(&run(&p, &["--json", "--addr", &addr, "policy", "create", "-f", file.to_str().unwrap()]));
    let file = write(t.path(), "lab.yaml", &policy("b"));
    let updated = json(&run(&p, &["--json", "--addr", &addr, "policy", "update", "-f", file.to_str().unwrap()]));
    assert_eq!(updated["action"], "update");
    assert_eq!(updated["status"], "applied");

    let root_arg = format!("@root={}", root.display());
    let data_arg = format!("data={}", t.path().join("data").display());
    let args = ["--json", "--addr", &addr, "run-demo", "inference", "--policy", "lab", "--app-service", "infer", "--volume", &root_arg, "--volume", &data_arg];
    let first = json(&run(&p, &args));
    assert!(first["output"].as_str().unwrap().starts_with("label="));
    assert_eq!(json(&run(&p, &args))["output"], first["output"]);
    // The output file is stored encrypted.
    let raw: Vec<u8> = std::fs::read_dir(t.path().join("data"))
        .unwrap()
        .flat_map(|e| std::fs::read(e.unwrap().path()).unwrap_or_default())
        .collect();
    assert!(!raw.windows(6).any(|w| w == b"label="));

    let csv_path = t.path().join("att.csv");
    let out = run(
        &p,
        &["--json", "bench", "attestation", "--samples", "2", "--remote-delay-ms", "20", "--parallelism", "1,2", "--csv", csv_path.to_str().unwrap()],
    );
    let summary = json(&out);
    assert!(summary["local"]["mean"].as_f64().unwrap() < summary["remote"]["mean"].as_f64().unwrap());
    assert_eq!(csv::Reader::from_path(&csv_path).unwrap().records().count(), 4);

    let out = run(&p, &["bench", "approval", "--step-ms", "60", "--rtt-ms", "0,5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv::Reader::from_reader(out.stdout.as_slice()).records().count();
    assert!(rows >= 2, "{rows}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity_per_second"));
}
