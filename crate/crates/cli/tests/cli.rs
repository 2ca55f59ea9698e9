use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

fn duet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(args)
        .current_dir(dir)
        .env_remove("DUET_LOG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = duet(dir, args);
    assert!(
        out.status.success(),
        "duet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "ingest", "pretrain", "rl-train", "generate", "score", "eval", "serve",
    ] {
        let out = duet(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage: duet"),
            "{sub}"
        );
    }
    assert_eq!(code(&duet(dir.path(), &["--help"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = duet(
        dir.path(),
        &["generate", "--human", "h.json", "--out", "o.json"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));

    let out = duet(dir.path(), &["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    std::fs::write(
        dir.path().join("bad.jsonl"),
        "{\"id\":\"x\",\"parts\":[[],[],[]]}\n",
    )
    .unwrap();
    let out = duet(
        dir.path(),
        &["ingest", "--in", "bad.jsonl", "--out", "c.jsonl"],
    );
    assert_eq!(code(&out), 1);

    let out = duet(
        dir.path(),
        &[
            "pretrain", "--view", "z", "--corpus", FIXTURES, "--out", "x.ckpt",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("taken")).unwrap();
    let out = duet(dir.path(), &["ingest", "--in", FIXTURES, "--out", "taken"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_beat_config_file_beats_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        format!(r#"{{"corpus": "{FIXTURES}", "epochs": 2, "model": "tiny", "augment": false, "view": "c"}}"#),
    )
    .unwrap();
    let from_file = ok(d, &["--config", "cfg.json", "pretrain", "--out", "a.ckpt"]);
    let epochs: Vec<&str> = from_file
        .lines()
        .filter(|l| l.contains("\"epoch\""))
        .collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs[0].contains("RWD_C"));

    let flagged = ok(
        d,
        &[
            "--config", "cfg.json", "pretrain", "--epochs", "1", "--view", "d", "--out", "b.ckpt",
        ],
    );
    let epochs: Vec<&str> = flagged
        .lines()
        .filter(|l| l.contains("\"epoch\""))
        .collect();
    assert_eq!(epochs.len(), 1);
    assert!(epochs[0].contains("RWD_D"));

    // --ckpt-dir places relative checkpoint paths
    ok(
        d,
        &[
            "--config",
            "cfg.json",
            "--ckpt-dir",
            "ck",
            "pretrain",
            "--epochs",
            "1",
            "--out",
            "c.ckpt",
        ],
    );
    assert!(d.join("ck/c.ckpt").is_file());
}

#[test]
fn log_level_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |level: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_duet"))
            .args(["ingest", "--in", FIXTURES, "--out", "c.jsonl"])
            .current_dir(dir.path())
            .env("DUET_LOG", level)
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stderr).unwrap()
    };
    assert!(run("info").contains("corpus written"));
    assert!(run("error").is_empty());
}

fn pipeline(dir: &Path, seed: &str) -> Vec<PathBuf> {
    ok(dir, &["ingest", "--in", FIXTURES, "--out", "corpus.jsonl"]);
    let common = [
        "--seed",
        seed,
        "--model",
        "tiny",
        "--augment",
        "false",
        "--corpus",
        "corpus.jsonl",
    ];
    let mut args = vec![
        "pretrain", "--suite", "true", "--epochs", "1", "--out", "ens",
    ];
    args.extend(common);
    ok(dir, &args);
    let stats = ok(
        dir,
        &[
            "--seed",
            seed,
            "--corpus",
            "corpus.jsonl",
            "rl-train",
            "--ensemble",
            "ens",
            "--init",
            "ens/rwd_a_lr0.01.ckpt",
            "--budget",
            "10",
            "--batch",
            "5",
            "--augment",
            "false",
            "--out",
            "rl.ckpt",
        ],
    );
    assert_eq!(
        stats.lines().filter(|l| l.contains("\"update\"")).count(),
        2
    );
    ok(
        dir,
        &[
            "generate",
            "--human",
            "corpus.jsonl",
            "--ckpt",
            "rl.ckpt",
            "--out",
            "gen/rl",
        ],
    );
    ok(
        dir,
        &[
            "generate",
            "--human",
            "corpus.jsonl",
            "--ckpt",
            "ens/rwd_a_lr0.01.ckpt",
            "--out",
            "gen/mle",
        ],
    );
    let rows = ok(
        dir,
        &[
            "eval",
            "--generated",
            "MLE=gen/mle",
            "--generated",
            "RL-Duet=gen/rl",
            "--reference",
            "corpus.jsonl",
            "--out",
            "report.json",
        ],
    );
    assert_eq!(rows.lines().count(), 2);
    let one = std::fs::read_dir(dir.join("gen/rl"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let scored = ok(
        dir,
        &[
            "score",
            "--duet",
            one.to_str().unwrap(),
            "--ensemble",
            "ens",
        ],
    );
    assert!(scored.lines().count() > 0);
    for line in scored.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["probs"].as_array().unwrap().len(), 6);
    }
    let mut outputs = vec![
        dir.join("ens/rwd_a_lr0.01.ckpt"),
        dir.join("rl.ckpt"),
        dir.join("report.json"),
    ];
    let mut generated: Vec<PathBuf> = std::fs::read_dir(dir.join("gen/rl"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    generated.sort();
    outputs.extend(generated);
    outputs
}

#[test]
fn smoke_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), "5");
    let second = pipeline(b.path(), "5");
    assert_eq!(first.len(), second.len());
    for (x, y) in first.iter().zip(&second) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["version"], 1);
    assert_eq!(report["rows"][1]["name"], "RL-Duet");
}

#[test]
fn generate_single_duet_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "pretrain", "--view", "a", "--epochs", "0", "--model", "tiny", "--corpus", FIXTURES,
            "--out", "g.ckpt",
        ],
    );
    let human: Vec<usize> = (0..64)
        .map(|t| {
            if t % 4 == 0 {
                2 + 2 * (24 + t % 7)
            } else {
                3 + 2 * (24 + (t / 4 * 4) % 7)
            }
        })
        .collect();
    std::fs::write(
        d.join("h.json"),
        serde_json::json!({"scheme": "MULTI_HOLD", "human": human}).to_string(),
    )
    .unwrap();
    ok(
        d,
        &[
            "generate", "--human", "h.json", "--ckpt", "g.ckpt", "--out", "o.json",
        ],
    );
    let out: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("o.json")).unwrap()).unwrap();
    assert_eq!(out["scheme"], "MULTI_HOLD");
    assert_eq!(out["human"].as_array().unwrap().len(), 64);
    let machine = out["machine"].as_array().unwrap();
    assert_eq!(machine.len(), 64);
    assert!(machine[..32].iter().all(|v| v == 1), "rest seed");

    // sampling is seeded
    let sample = |seed: &str, name: &str| {
        ok(
            d,
            &[
                "--seed",
                seed,
                "generate",
                "--human",
                "h.json",
                "--ckpt",
                "g.ckpt",
                "--temperature",
                "1",
                "--out",
                name,
            ],
        );
        std::fs::read(d.join(name)).unwrap()
    };
    assert_eq!(sample("3", "s1.json"), sample("3", "s2.json"));
}
