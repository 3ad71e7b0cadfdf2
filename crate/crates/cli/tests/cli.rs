use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use hicra_core::SgSet;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn hicra(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hicra"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn mine_three_solutions_offline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("three_solutions.jsonl");
    let o = hicra(dir.path(), &["mine", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let set = SgSet::load(dir.path().join("sgset.json")).unwrap();
    assert!(!set.clusters.is_empty());
    assert!(dir.path().join("clusters.json").exists());
}

#[test]
fn advantage_rejects_alpha_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("traces.jsonl");
    let o = hicra(dir.path(), &["advantage", "--corpus", corpus.to_str().unwrap(), "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(0, 1)"), "{}", stderr(&o));
    assert!(!dir.path().join("advantages.jsonl").exists());
}

#[test]
fn advantage_default_hicra() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("traces.jsonl");
    let o = hicra(dir.path(), &["advantage", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = jsonl(&dir.path().join("advantages.jsonl"));
    assert!(!rows.is_empty());
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = hicra(d.path(), &["--seed", "7", "simulate", "--steps", "200", "--method", "hicra"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["series.json", "policy.json", "reward.csv", "probe.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn classify_labels_match_spans() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("traces.jsonl");
    let before = fs::read(&corpus).unwrap();
    let o = hicra(dir.path(), &["classify", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(&corpus).unwrap(), before, "input mutated");
    let rows = jsonl(&dir.path().join("annotated.jsonl"));
    assert_eq!(rows.len(), 24);
    let mut planning = 0;
    for r in &rows {
        let mask = r["mask"].as_array().unwrap();
        assert_eq!(mask.len(), r["tokens"].as_array().unwrap().len());
        planning += mask.iter().filter(|m| m.as_u64() == Some(1)).count();
        let text: Vec<char> = r["full_text"].as_str().unwrap().chars().collect();
        for m in r["matches"].as_array().unwrap() {
            let (s, e) = (m["start"].as_u64().unwrap() as usize, m["end"].as_u64().unwrap() as usize);
            assert!(s < e && e <= text.len());
        }
    }
    assert!(planning > 0);
}

#[test]
fn metrics_writes_series_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("traces.jsonl");
    let o = hicra(
        dir.path(),
        &["metrics", "--corpus", corpus.to_str().unwrap(), "--pass-k", "1,2", "--drop-rho", "0.3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["series"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"semantic_entropy"), "{names:?}");
    assert!(names.contains(&"semantic_entropy_dropped"), "{names:?}");
    let csv = fs::read_to_string(dir.path().join("semantic_entropy.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("step,"));
    assert_eq!(csv.lines().count(), 4, "header plus steps 0/10/20");
}

#[test]
fn report_merges_inputs() {
    let root = tempfile::tempdir().unwrap();
    let (sim, met, rep) = (root.path().join("sim"), root.path().join("met"), root.path().join("rep"));
    let corpus = fixture("traces.jsonl");
    assert!(hicra(&sim, &["simulate", "--steps", "120"]).status.success());
    assert!(hicra(&met, &["metrics", "--corpus", corpus.to_str().unwrap()]).status.success());
    let o = hicra(&rep, &["report", "--input", sim.to_str().unwrap(), met.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(rep.join("summary.txt")).unwrap();
    assert!(summary.contains("two-phase probe: phase1_detected"), "{summary}");
    assert!(summary.contains("not applicable"), "{summary}");
    assert!(rep.join("tables").read_dir().unwrap().count() > 0);
    let svg = fs::read_to_string(rep.join("plots/reward.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

/// Answers `n` chat requests with a fixed completion.
fn stub_server(n: usize, content: &'static str) -> (String, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, handle)
}

#[test]
fn judge_against_stub_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cases = fixture("failures.jsonl");
    let (url, handle) = stub_server(3, "Reasoning... \\boxed{C}");
    let o = hicra(dir.path(), &["judge", "--cases", cases.to_str().unwrap(), "--url", &url, "--model", "stub"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    handle.join().unwrap();
    let verdicts = jsonl(&dir.path().join("verdicts.jsonl"));
    assert_eq!(verdicts.len(), 3);
    assert!(verdicts.iter().all(|v| v["choice"] == "C"), "{verdicts:?}");
    assert!(dir.path().join("judge_report.json").exists());

    // A second run is served from the cache; the dead URL is never contacted.
    let o = hicra(
        dir.path(),
        &["judge", "--cases", cases.to_str().unwrap(), "--url", "http://127.0.0.1:9/", "--model", "stub"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn judge_unreachable_endpoint_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cases = fixture("failures.jsonl");
    let toml = dir.path().join("cfg.toml");
    fs::write(&toml, "[judge]\nretries = 0\ntimeout_secs = 2\n").unwrap();
    let o = hicra(
        dir.path(),
        &["--config", toml.to_str().unwrap(), "judge", "--cases", cases.to_str().unwrap(), "--url", "http://127.0.0.1:9/"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_settings() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("cfg.toml");
    fs::write(&toml, "[simulate.train]\nsteps = 40\nmethod = \"grpo\"\n").unwrap();
    let out = dir.path().join("out");
    let o = hicra(&out, &["--config", toml.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("reward.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("cfg.toml");
    fs::write(&toml, "[simulate]\nno_such_key = 1\n").unwrap();
    assert_eq!(hicra(dir.path(), &["--config", toml.to_str().unwrap(), "simulate"]).status.code(), Some(1));
    assert_eq!(hicra(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(hicra(dir.path(), &["classify"]).status.code(), Some(1), "missing --corpus");
}

#[test]
fn missing_input_file_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = hicra(dir.path(), &["classify", "--corpus", "/nonexistent/traces.jsonl"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
