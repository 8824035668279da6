#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use memscope_core::registry::{CloseStatus, Marker, MarkerLabel};
use memscope_core::store::CSV_HEADER;
use memscope_core::{run_summary, DataDir, Registry, RunFilter, RunStatus, Store};
use serde_json::Value;

fn memscope(data: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memscope"));
    cmd.arg("--data-dir").arg(data).args(["--gateway-port", "0"]);
    cmd.env_remove("MEMSCOPE_DATA_DIR")
        .env_remove("MEMSCOPE_RUN_ID")
        .env_remove("MEMSCOPE_GATEWAY");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.stdin(Stdio::null()).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn run_id_of(text: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix("run_id: "))
        .expect("run_id line")
        .to_owned()
}

fn open(dir: &Path) -> (Registry, Store) {
    let data = DataDir::new(dir);
    (Registry::open(data.clone()).unwrap(), Store::open(data).unwrap())
}

/// A run with samples at 1 s spacing and markers for two epochs.
fn fixture_run(dir: &Path) -> String {
    let (registry, store) = open(dir);
    let id = registry.create_run(common::hp("mlp"), 1_000).unwrap().run_id;
    for (i, used) in [100u64, 400, 900, 300, 700, 200].iter().enumerate() {
        store
            .append(
                &id,
                &common::record(&id, 1_000 * (i as i64 + 1), *used << 20, Some(*used << 19)),
            )
            .unwrap();
    }
    for (epoch, start, end) in [(1, 1_000, 3_500), (2, 3_500, 6_500)] {
        for (ts, label) in [(start, MarkerLabel::EpochStart), (end, MarkerLabel::EpochEnd)] {
            registry
                .add_marker(Marker {
                    run_id: id.clone(),
                    ts_unix_ms: ts,
                    label,
                    epoch: Some(epoch),
                    note: None,
                })
                .unwrap();
        }
    }
    registry.close_run(&id, CloseStatus::Closed, 7_000).unwrap();
    id
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["record", "--interval-ms", "0"],
        &["--interval-ms", "5", "runs"],
        &["frobnicate"],
        &[],
        &["demo-workload", "--mib", "0"],
        &["demo-workload", "--mib", "8", "--steps", "0"],
        &["record", "--hp", "novalue"],
        &["record", "--layers", "0"],
        &["record", "--model", ""],
        &["record", "--hp", "epochs=many"],
        &["record", "--duration-s", "0"],
        &["attach", "--pid", "0"],
        &["attach"],
        &["runs", "--status", "paused"],
        &["export", "r1", "--format", "parquet"],
        &["report"],
    ];
    for args in cases {
        let out = run(memscope(dir.path()).args(*args));
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!dir.path().join("runs").exists() || std::fs::read_dir(dir.path().join("runs")).unwrap().count() == 0);
}

#[test]
fn operational_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["report", "missing-run"],
        &["export", "missing-run", "--format", "csv", "--out", "x.csv"],
        &["attach", "--pid", "999999999"],
        &["--meminfo", "/nonexistent/meminfo", "record", "--duration-s", "1"],
        &["--meminfo", "/nonexistent/meminfo", "serve", "--port", "0"],
        &["record", "--duration-s", "5", "--", "/nonexistent/program"],
        &["demo-workload", "--mib", "1", "--connect", "127.0.0.1:1"],
    ];
    for args in cases {
        let out = run(memscope(dir.path()).args(*args));
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}

#[test]
fn record_for_a_duration() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(memscope(dir.path()).args([
        "--interval-ms",
        "100",
        "record",
        "--model",
        "mlp",
        "--layers",
        "3",
        "--nodes",
        "128",
        "--epochs",
        "10",
        "--dataset",
        "mnist",
        "--hp",
        "lr=0.01",
        "--duration-s",
        "2",
    ]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let id = run_id_of(&text);
    assert!(text.contains("peak_used_bytes"));
    let (registry, store) = open(dir.path());
    let run = registry.get(&id).unwrap();
    assert_eq!(run.status, RunStatus::Closed);
    assert_eq!(run.hyperparameters.nodes_per_layer, 128);
    assert_eq!(run.hyperparameters.extra.get("lr").map(String::as_str), Some("0.01"));
    let n = store.sample_count(&id).unwrap();
    assert!((15..=25).contains(&n), "{n} samples");
}

#[test]
fn failing_command_aborts_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(memscope(dir.path()).args(["--interval-ms", "20", "record", "--", "sh", "-c", "sleep 0.2; exit 3"]));
    assert_eq!(code(&out), 1);
    let (registry, _) = open(dir.path());
    assert_eq!(
        registry.get(&run_id_of(&stdout(&out))).unwrap().status,
        RunStatus::Aborted
    );
}

#[test]
fn wrapped_command_sees_run_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(memscope(dir.path()).args([
        "--interval-ms",
        "20",
        "record",
        "--",
        "sh",
        "-c",
        "echo \"child $MEMSCOPE_RUN_ID\"",
    ]));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains(&format!("child {}", run_id_of(&text))));
    let (registry, _) = open(dir.path());
    let id = run_id_of(&text);
    assert!(registry.target_pid(&id).unwrap().is_some());
}

fn spawn_piped(cmd: &mut Command) -> (Child, BufReader<std::process::ChildStdout>) {
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let reader = BufReader::new(child.stdout.take().unwrap());
    (child, reader)
}

fn read_line_with(reader: &mut BufReader<std::process::ChildStdout>, prefix: &str) -> String {
    let mut line = String::new();
    loop {
        line.clear();
        assert!(reader.read_line(&mut line).unwrap() > 0, "no `{prefix}` line");
        if let Some(rest) = line.trim_end().strip_prefix(prefix) {
            return rest.to_owned();
        }
    }
}

fn interrupt(child: &Child) {
    // SAFETY: plain signal delivery to a child we own.
    assert_eq!(unsafe { libc::kill(child.id() as i32, libc::SIGINT) }, 0);
}

fn wait_with_timeout(child: &mut Child, limit: Duration) -> i32 {
    let started = Instant::now();
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s.code().unwrap();
        }
        if started.elapsed() > limit {
            let _ = child.kill();
            panic!("process did not exit within {limit:?}");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn interrupt_closes_run_as_aborted_and_keeps_data() {
    let dir = tempfile::tempdir().unwrap();
    let (mut child, mut out) =
        spawn_piped(memscope(dir.path()).args(["--interval-ms", "50", "record", "--", "sleep", "30"]));
    let id = read_line_with(&mut out, "run_id: ");
    let (registry, store) = open(dir.path());
    let started = Instant::now();
    while store.sample_count(&id).unwrap() < 5 {
        assert!(started.elapsed() < Duration::from_secs(10));
        std::thread::sleep(Duration::from_millis(20));
    }
    interrupt(&child);
    assert_eq!(wait_with_timeout(&mut child, Duration::from_secs(10)), 0);
    let run = registry.get(&id).unwrap();
    assert_eq!(run.status, RunStatus::Aborted);
    let samples = store.read_all(&id).unwrap();
    assert!(samples.len() >= 5);
    assert!(samples.iter().any(|s| s.process.is_some()));
}

#[test]
fn report_restates_analysis_values() {
    let dir = tempfile::tempdir().unwrap();
    let id = fixture_run(dir.path());
    let (_, store) = open(dir.path());
    let summary = run_summary(&store.read_all(&id).unwrap()).unwrap();

    let out = run(memscope(dir.path()).args(["report", &id]));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let value_of = |key: &str| {
        text.lines()
            .find_map(|l| {
                l.strip_prefix(key)
                    .filter(|r| r.starts_with(' '))
                    .map(|r| r.trim().to_owned())
            })
            .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
    };
    assert_eq!(value_of("peak_used_bytes"), summary.peak_used_bytes.to_string());
    assert_eq!(value_of("baseline_used_bytes"), summary.baseline_used_bytes.to_string());
    assert_eq!(
        value_of("mean_used_bytes"),
        serde_json::to_string(&summary.mean_used_bytes).unwrap()
    );
    assert_eq!(
        value_of("growth_slope_bytes_per_s"),
        serde_json::to_string(&summary.growth_slope_bytes_per_s).unwrap()
    );
    let epoch_rows: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("epoch ")).skip(1).collect();
    assert_eq!(epoch_rows.len(), 2, "{text}");
    assert!(epoch_rows[0].starts_with("1 ") && epoch_rows[1].starts_with("2 "));

    let out = run(memscope(dir.path()).args(["report", &id, "--json"]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["summary"], serde_json::to_value(&summary).unwrap());
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn runs_lists_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let closed = fixture_run(dir.path());
    let (registry, _) = open(dir.path());
    let live = registry.create_run(common::hp("cnn"), 9_000).unwrap().run_id;

    let out = run(memscope(dir.path()).args(["runs", "--status", "recording"]));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.starts_with("run_id"));
    assert!(text.contains(&live) && !text.contains(&closed));

    let out = run(memscope(dir.path()).args(["runs", "--json"]));
    let want = serde_json::to_string(&registry.list_runs(&RunFilter::default()).unwrap()).unwrap();
    assert_eq!(stdout(&out).trim_end(), want);

    let out = run(memscope(dir.path()).args(["runs", "--model", "mlp", "--json"]));
    let listed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(listed[0]["run_id"], closed.as_str());
}

#[test]
fn export_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let id = fixture_run(dir.path());
    let path = dir.path().join("out.csv");
    let out = run(memscope(dir.path())
        .args(["export", &id, "--format", "csv", "--out"])
        .arg(&path));
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(text.lines().count(), 7);

    let out = run(memscope(dir.path()).args(["export", &id]));
    assert_eq!(stdout(&out), text);
}

#[test]
fn data_dir_flag_beats_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let id = fixture_run(env_dir.path());
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memscope"));
    let out = run(cmd.env("MEMSCOPE_DATA_DIR", env_dir.path()).args(["runs", "--json"]));
    assert!(stdout(&out).contains(&id));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memscope"));
    let out = run(cmd
        .env("MEMSCOPE_DATA_DIR", env_dir.path())
        .arg("--data-dir")
        .arg(flag_dir.path())
        .args(["runs", "--json"]));
    assert_eq!(stdout(&out).trim(), "[]");
}

#[test]
fn demo_workload_standalone() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(memscope(dir.path()).args([
        "demo-workload",
        "--mib",
        "4",
        "--steps",
        "2",
        "--hold-ms",
        "0",
        "--step-ms",
        "0",
    ]));
    assert_eq!(code(&out), 0);
}

fn http_get(addr: &str, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut text = String::new();
    stream.read_to_string(&mut text).unwrap();
    let status = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    (
        status,
        text.split_once("\r\n\r\n")
            .map(|(_, b)| b.to_owned())
            .unwrap_or_default(),
    )
}

#[test]
fn serve_prints_address_and_records_gateway_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (mut child, mut out) = spawn_piped(memscope(dir.path()).args(["--interval-ms", "50", "serve", "--port", "0"]));
    let http = read_line_with(&mut out, "listening on http://");
    let gateway = read_line_with(&mut out, "marker gateway on ");

    let (status, body) = http_get(&http, "/api/system/now");
    assert_eq!(status, 200);
    assert!(body.contains("total_bytes"));

    let mut client = memscope_core::gateway::GatewayClient::connect(gateway.as_str()).unwrap();
    let id = client.create_run(&common::hp("mlp")).unwrap();
    std::thread::sleep(Duration::from_millis(400));
    let (status, body) = http_get(&http, &format!("/api/runs/{id}/summary"));
    assert_eq!(status, 200, "{body}");

    interrupt(&child);
    assert_eq!(wait_with_timeout(&mut child, Duration::from_secs(10)), 0);
    let (registry, store) = open(dir.path());
    assert_eq!(registry.get(&id).unwrap().status, RunStatus::Aborted);
    assert!(store.sample_count(&id).unwrap() >= 3);
}

#[test]
fn busy_gateway_port_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = run(Command::new(env!("CARGO_BIN_EXE_memscope"))
        .arg("--data-dir")
        .arg(dir.path())
        .args(["--gateway-port", &port, "record", "--duration-s", "1"]));
    assert_eq!(code(&out), 1);
    let (registry, _) = open(dir.path());
    assert!(registry.list_runs(&RunFilter::default()).unwrap().is_empty());
}
