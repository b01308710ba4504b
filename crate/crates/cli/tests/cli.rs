use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn proxyme() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_proxyme"));
    cmd.current_dir(root());
    for (k, _) in std::env::vars() {
        if k.starts_with("PROXYME_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_config_validates() {
    let out = run(proxyme().args(["--config", "config/proxyme.toml", "validate"]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("scenarios ok: 8 scenarios"), "{stdout}");
    assert!(stdout.contains("questionnaire ok: 5 items"), "{stdout}");
}

#[test]
fn missing_adapters_section_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "port = 9000\n[pipeline]\nstreaming = true\n").unwrap();
    let out = run(proxyme().arg("--config").arg(&path).arg("validate"));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("[adapters]"), "{}", text(&out.stderr));
}

#[test]
fn bad_scenario_file_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, "[]").unwrap();
    let out = run(proxyme().args(["--config", "config/proxyme.toml", "validate", "--scenarios"]).arg(&path));
    assert_eq!(out.status.code(), Some(1));
    assert!(!text(&out.stderr).is_empty());
}

#[test]
fn env_and_flag_overrides_apply_in_order() {
    let out = run(proxyme()
        .env("PROXYME_PIPELINE__CHUNK_MS", "250")
        .args(["--config", "config/proxyme.toml", "validate"]));
    assert!(text(&out.stdout).contains("chunk_ms=250"), "{}", text(&out.stdout));

    let out = run(proxyme()
        .env("PROXYME_PIPELINE__CHUNK_MS", "250")
        .args(["--config", "config/proxyme.toml", "--set", "pipeline.chunk_ms=400", "validate"]));
    assert!(text(&out.stdout).contains("chunk_ms=400"), "{}", text(&out.stdout));
}

#[test]
fn serve_prints_banner_and_answers_health() {
    let mut child = proxyme()
        .args(["--config", "config/proxyme.toml", "--set", "port=0", "serve"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .split("ws://")
        .nth(1)
        .and_then(|s| s.split('/').next())
        .unwrap_or_else(|| panic!("no address in banner: {line}"))
        .to_owned();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains(r#""status":"ok""#), "{reply}");
}

#[test]
fn occupied_port_exits_with_bind_error() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let out = run(proxyme()
        .args(["--config", "config/proxyme.toml", "--set"])
        .arg(format!("port={port}"))
        .arg("serve"));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("cannot bind"), "{}", text(&out.stderr));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = run(proxyme()
            .args(["--config", "config/proxyme.toml", "simulate", "--participants", "2", "--seed", "11", "--out"])
            .arg(dir.path().join(name)));
        assert!(out.status.success(), "{}", text(&out.stderr));
    }
    let a = files(&dir.path().join("a"));
    assert_eq!(a.len(), 5);
    assert_eq!(a, files(&dir.path().join("b")));
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(proxyme()
        .args(["--config", "config/proxyme.toml", "simulate", "--runs", "12", "--batch", "--out"])
        .arg(dir.path().join("batch")));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("12 runs (batch"), "{}", text(&out.stdout));

    let md_path = dir.path().join("report.md");
    let out = run(proxyme().arg("report").arg(dir.path()).arg("--out").arg(&md_path));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let md = text(&out.stdout);
    assert!(md.contains("| mean | 11600.0 | absent |"), "{md}");
    assert_eq!(std::fs::read_to_string(md_path).unwrap(), md);
}

#[test]
fn report_without_logs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(proxyme().arg("report").arg(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("no session logs"), "{}", text(&out.stderr));
}

#[test]
fn invalid_override_is_rejected() {
    let out = run(proxyme().args(["--set", "pipeline.chunk_ms=soon", "validate"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("chunk_ms"), "{}", text(&out.stderr));
}

#[test]
fn script_and_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(proxyme().args(["script", "--participant", "3", "--trials", "1", "--seed", "2"]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let script = dir.path().join("p3.jsonl");
    std::fs::write(&script, &out.stdout).unwrap();

    let out = run(proxyme()
        .args([
            "--config",
            "config/proxyme.toml",
            "--set",
            "adapters.latency.stt_ms.fixed=10",
            "--set",
            "adapters.latency.llm_ms.fixed=10",
            "--set",
            "adapters.latency.tts_total_ms.fixed=40",
            "--set",
            "adapters.latency.tts_first_chunk_ms.fixed=10",
            "--set",
            "adapters.words_per_minute=60000",
            "--set",
            "pipeline.chunk_ms=20",
            "replay",
        ])
        .arg(&script)
        .arg("--out")
        .arg(dir.path().join("logs")));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let names: Vec<_> = files(&dir.path().join("logs")).into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n.ends_with(".log.jsonl")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with(".prov.jsonl")), "{names:?}");
}
