mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{write_corpus, TestSample};

fn longsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longsel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn corpus(dir: &Path) {
    let samples: Vec<TestSample> = (0..20u32)
        .map(|i| TestSample {
            id: format!("s{i:02}"),
            context: (0..12).map(|t| (t * 7 + i) % 16).collect(),
            instruction: vec![(i + 3) % 16],
            response: vec![(i * 7) % 16, (i + 11) % 16],
        })
        .collect();
    write_corpus(&dir.join("long.jsonl"), &samples);
}

const CONFIG: &str = r#"
mode = "gateau"
long_corpus = "long.jsonl"
cache = "cache.jsonl"
manifest = "manifest.jsonl"
output = "train.jsonl"
segment_length = 4
cut_ratio = 0.25

[backend_a]
kind = "mock"
name = "short"
context_window = 512
vocab_size = 16
copy_bonus = 9.0
window = 4
attention_bonus = 9.0

[backend_b]
kind = "mock"
name = "long"
context_window = 4096
vocab_size = 16
copy_bonus = 9.0
attention_bonus = 9.0
"#;

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn score_select_emit_report() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();

    let out = longsel(&["score", "--config", cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty(), "score writes data to files only");

    let out = longsel(&["select", "--config", cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("selected"), "{report}");
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains("\"selected\":true")).count(), 5);

    let out = longsel(&["emit", "--config", cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let train = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 5);

    let manifest_path = dir.path().join("manifest.jsonl");
    let out = longsel(&["report", manifest_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), strip_timings(&report));

    // Flag overrides apply on top of the file.
    let out = longsel(&["select", "--config", cfg, "--mode", "hmg_only", "--cut-ratio", "0.5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert!(manifest.lines().next().unwrap().contains("\"mode\":\"hmg_only\""));
    assert_eq!(manifest.lines().filter(|l| l.contains("\"selected\":true")).count(), 10);
}

/// Drops the timing section, which only a live `select` prints.
fn strip_timings(report: &str) -> &str {
    match report.find("\ntiming:") {
        Some(i) => &report[..i],
        None => report,
    }
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG.replace("cut_ratio = 0.25", "cut_ratio = 1.5")).unwrap();
    let out = longsel(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("cut_ratio"));

    std::fs::write(&cfg, CONFIG).unwrap();
    let out = longsel(&["select", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "select before score: {}", stderr(&out));

    let out = longsel(&["score", "--config", cfg.to_str().unwrap(), "--mode", "bogus"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn unreachable_backend_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    // Bind and drop to find a port nothing listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = dir.path().join("run.toml");
    let text = CONFIG.replace(
        "[backend_b]\nkind = \"mock\"\nname = \"long\"\ncontext_window = 4096\nvocab_size = 16\ncopy_bonus = 9.0\nattention_bonus = 9.0\n",
        &format!("[backend_b]\nkind = \"tcp\"\naddress = \"127.0.0.1:{port}\"\n"),
    );
    assert!(text.contains("tcp"));
    std::fs::write(&cfg, text).unwrap();
    let out = longsel(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn process_backend_via_config() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let bin = env!("CARGO_BIN_EXE_longsel");
    let cfg = dir.path().join("run.toml");
    let text = CONFIG.replace(
        "[backend_b]\nkind = \"mock\"\nname = \"long\"\ncontext_window = 4096\nvocab_size = 16\ncopy_bonus = 9.0\nattention_bonus = 9.0\n",
        &format!(
            "[backend_b]\nkind = \"process\"\ncommand = [\"{bin}\", \"serve-mock\", \"--name\", \"long\", \"--vocab-size\", \"16\", \"--context-window\", \"4096\"]\n"
        ),
    );
    std::fs::write(&cfg, &text).unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let out = longsel(&["score", "--config", cfg_s]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = longsel(&["select", "--config", cfg_s]);
    assert!(out.status.success(), "{}", stderr(&out));
    let via_process = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();

    // The in-process mock with the same parameters gives the same manifest.
    let inproc = tempfile::tempdir().unwrap();
    corpus(inproc.path());
    let cfg2 = inproc.path().join("run.toml");
    std::fs::write(&cfg2, CONFIG).unwrap();
    let cfg2 = cfg2.to_str().unwrap();
    assert!(longsel(&["score", "--config", cfg2]).status.success());
    assert!(longsel(&["select", "--config", cfg2]).status.success());
    assert_eq!(std::fs::read(inproc.path().join("manifest.jsonl")).unwrap(), via_process);
}
