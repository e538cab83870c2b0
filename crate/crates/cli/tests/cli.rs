use std::path::Path;
use std::process::{Command, Output};

fn apollo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apollo")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A tiny conditional run so checkpoint-driven subcommands have something
/// to load.
fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = r#"{"batch":2,"d_steps_per_g":1,"latent_dim":4,"conditional":true,
        "arch":{"head_hidden":4,"tail_channels":2,"critic_widths":[2,2,2,2]},
        "data":{"clips_per_class":4},"ndb_k":4,"eval_fakes":8}"#;
    std::fs::write(dir.join("tiny.json"), cfg).unwrap();
    let o = apollo(&["train", "--config", "tiny.json", "--steps", "2", "--seed", "3", "--out", "run"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("run")
}

#[test]
fn unknown_flag_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(apollo(&["verify", "--no-such-flag"], d.path()).status.code(), Some(2));
    assert_eq!(apollo(&["no-such-command"], d.path()).status.code(), Some(2));
}

#[test]
fn verify_filter_selects_lemmas() {
    let d = tempfile::tempdir().unwrap();
    let o = apollo(&["verify", "--filter", "lemma*", "--out", "report.txt"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("resolved config"));
    let checks: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|l| l.starts_with("PASS") && l.contains("lemma_")));
    assert!(d.path().join("report.txt").exists());
}

#[test]
fn verify_runs_at_least_twenty_checks() {
    let d = tempfile::tempdir().unwrap();
    let o = apollo(&["verify"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let n = stdout(&o).lines().filter(|l| l.starts_with("PASS")).count();
    assert!(n >= 20, "only {n} checks");
}

#[test]
fn filter_matching_nothing_fails() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(apollo(&["verify", "--filter", "zzz*"], d.path()).status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), r#"{"seed": 5, "filter": "roundtrip_wav"}"#).unwrap();
    let o = apollo(&["verify", "--config", "c.json", "--seed", "9"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.contains(r#""seed":9"#) && first.contains(r#""filter":"roundtrip_wav""#), "{first}");
}

#[test]
fn stft_round_trip_of_a_tone() {
    let d = tempfile::tempdir().unwrap();
    let tone: Vec<f64> = (0..16000).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect();
    apollo::tfrep::write_wav(&d.path().join("tone.wav"), &tone, 16000).unwrap();
    let o = apollo(&["stft", "--in", "tone.wav", "--roundtrip", "--out", "tone.spcg"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("round trip")).unwrap();
    let err: f64 = line.split_whitespace().nth(5).unwrap().parse().unwrap();
    assert!(err < 1e-9, "{line}");
    assert!(d.path().join("tone.spcg").exists());
}

#[test]
fn missing_input_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(apollo(&["stft", "--roundtrip"], d.path()).status.code(), Some(2));
    assert_eq!(apollo(&["stft", "--in", "absent.wav"], d.path()).status.code(), Some(1));
}

#[test]
fn checkpoint_subcommands() {
    let d = tempfile::tempdir().unwrap();
    let run = tiny_checkpoint(d.path());
    assert!(run.join("ckpt").exists() && run.join("config.json").exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let o = apollo(&["generate", "--ckpt", "run/ckpt", "--n", "0", "--out", "none"], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(!d.path().join("none").exists());

    let o = apollo(&["generate", "--ckpt", "run", "--n", "3", "--label", "1", "--out", "wavs"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(d.path().join("wavs")).unwrap().count(), 3);

    let o = apollo(&["metrics", "--ckpt", "run/ckpt", "--n", "8", "--k", "4"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert!(v["ndb"].is_u64() && v["jsd"].as_f64().is_some_and(|j| (0.0..=1.0).contains(&j)));

    let o = apollo(&["interp", "--ckpt", "run/ckpt", "--label", "2", "--out", "line"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("finite true"));
    assert_eq!(std::fs::read_dir(d.path().join("line")).unwrap().count(), 20);

    let o = apollo(&["generate", "--ckpt", "run/ckpt", "--n", "1", "--label", "99"], d.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn same_seed_gives_same_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = tiny_checkpoint(a.path());
    let rb = tiny_checkpoint(b.path());
    assert_eq!(std::fs::read(ra.join("ckpt")).unwrap(), std::fs::read(rb.join("ckpt")).unwrap());
}

#[test]
fn injected_fault_is_reported_by_name() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_apollo"))
        .args(["verify", "--filter", "oracle_ccp"])
        .env("APOLLO_FAULT_INJECTION", "1")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("FAIL oracle_ccp")), "{text}");
    assert!(text.contains("failing checks: oracle_ccp"));
}
