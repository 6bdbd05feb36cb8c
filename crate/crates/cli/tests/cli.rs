use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
[synth]
num_names = 12
[model]
layers = 2
dim = 16
heads = 2
ffn_hidden = 32
retrieval_layer = 1
[corpus]
size = 50
kb_names = 10
[pretrain]
steps = 3
batch_size = 2
[train.optimizer]
total_steps = 2
[train.batch]
kb_size_range = [4, 6]
[embed]
kind = "hash_ngram"
dim = 32
[eval]
m_list = [4]
n_questions = 5
refusal_total = 5
refusal_answerable = 4
refusal_m = 4
answer_samples = 4
answer_m = 4
max_new = 12
[bench]
m_list = [4, 8]
repeats = 1
n_fixed = 8
"#;

fn kblam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kblam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kblam(args);
    assert!(
        out.status.success(),
        "kblam {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = kblam(args);
    assert!(!out.status.success(), "kblam {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "error is one line: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

/// synth, pretrain, train, encode and all evaluations into `out`.
fn pipeline(config: &str, out: &Path) {
    let base = ["--config", config, "--out", s(out)];
    for cmd in [
        &["synth"][..],
        &["embed"],
        &["pretrain"],
        &["train"],
        &["encode"],
        &["eval", "retrieval"],
        &["eval", "refusal"],
        &["eval", "answers"],
        &["export", "layer-variance"],
    ] {
        let args: Vec<&str> = base.iter().copied().chain(cmd.iter().copied()).collect();
        ok(&args);
    }
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--out", s(&a), "--seed", "7", "synth", "--names", "100"]);
    ok(&["--out", s(&b), "--seed", "7", "synth", "--names", "100"]);
    let ka = fs::read(a.join("kb.jsonl")).unwrap();
    assert_eq!(ka, fs::read(b.join("kb.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ka).unwrap().lines().count(), 300);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["synth"]["seed"], 7);
    assert_eq!(resolved["synth"]["num_names"], 100);
}

#[test]
fn tiny_pipeline_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);
    for f in [
        "kb.jsonl",
        "base.ckpt",
        "adapters.ckpt",
        "tokens.bin",
        "train_metrics.csv",
        "retrieval.csv",
        "retrieval.jsonl",
        "refusal.csv",
        "answers.csv",
        "layer_variance.csv",
    ] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let retrieval = fs::read_to_string(a.join("retrieval.csv")).unwrap();
    assert!(retrieval.starts_with("method,M,layer,n,top1,top5"));
    assert!(retrieval.contains("attention,4,1,5,"));
    assert!(retrieval.contains("bm25,4,"));

    let bench = dir.path().join("bench");
    ok(&[
        "--config",
        &config,
        "--out",
        s(&bench),
        "--kb",
        s(&a.join("kb.jsonl")),
        "--base",
        s(&a.join("base.ckpt")),
        "--checkpoint",
        s(&a.join("adapters.ckpt")),
        "bench",
    ]);
    let csv = fs::read_to_string(bench.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("method,M,median_ms,entries"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn kb_update_matches_fresh_encode() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");
    pipeline(&config, &run);
    let common = |out: &Path| {
        vec![
            "--config".to_string(),
            config.clone(),
            "--out".into(),
            s(out).into(),
            "--base".into(),
            s(&run.join("base.ckpt")).into(),
            "--checkpoint".into(),
            s(&run.join("adapters.ckpt")).into(),
        ]
    };
    let question = "What is the purpose of Zed Quill?";

    let upd = dir.path().join("upd");
    let mut args = common(&upd);
    args.extend(
        [
            "--kb",
            s(&run.join("kb.jsonl")),
            "--tokens",
            s(&run.join("tokens.bin")),
            "ask",
            "--question",
            question,
            "--kb-update",
            "name=Zed Quill,property=purpose,value=to test, carefully",
            "--evidence",
        ]
        .map(String::from),
    );
    let updated_answer = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(updated_answer.lines().rev().take(5).all(|l| l.contains("\t(")));

    let fresh = dir.path().join("fresh");
    let mut args = common(&fresh);
    args.extend(["--kb", s(&upd.join("kb.updated.jsonl")), "encode"].map(String::from));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        fs::read(upd.join("tokens.updated.bin")).unwrap(),
        fs::read(fresh.join("tokens.bin")).unwrap()
    );

    let mut args = common(&fresh);
    args.extend(
        [
            "--kb",
            s(&upd.join("kb.updated.jsonl")),
            "--tokens",
            s(&fresh.join("tokens.bin")),
            "ask",
            "--question",
            question,
            "--evidence",
        ]
        .map(String::from),
    );
    assert_eq!(ok(&args.iter().map(String::as_str).collect::<Vec<_>>()), updated_answer);

    // Inputs are left untouched.
    let original = fs::read_to_string(run.join("kb.jsonl")).unwrap();
    assert!(!original.contains("Zed Quill"));

    // Old tokens against the updated KB are stale.
    let mut args = common(&fresh);
    args.extend(
        [
            "--kb",
            s(&upd.join("kb.updated.jsonl")),
            "--tokens",
            s(&run.join("tokens.bin")),
            "ask",
            "--question",
            question,
        ]
        .map(String::from),
    );
    let err = fail(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(err.contains("stale"), "{err}");
}

#[test]
fn config_errors_name_the_key() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train.optimizer]\nlr_start = \"fast\"\n").unwrap();
    let err = fail(&["--config", s(&cfg), "--out", s(&out), "synth"]);
    assert!(err.contains("train.optimizer.lr_start"), "{err}");

    fs::write(&cfg, "[eval]\nn_questons = 3\n").unwrap();
    let err = fail(&["--config", s(&cfg), "--out", s(&out), "synth"]);
    assert!(err.contains("eval.n_questons"), "{err}");

    let err = fail(&["--out", s(&out), "--inject-every", "0", "synth"]);
    assert!(err.contains("inject_every"), "{err}");
}

#[test]
fn missing_inputs_fail_with_one_line() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let err = fail(&["--out", s(&out), "train"]);
    assert!(err.starts_with("error: loading base model"), "{err}");
}

#[test]
fn flags_override_the_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 5\n[synth]\nnum_names = 4\n[model]\nscale_c = 7.0\n").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--scale-C",
        "50",
        "--M-list",
        "2,3",
        "synth",
    ]);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(r["seed"], 5);
    assert_eq!(r["synth"]["num_names"], 4);
    assert_eq!(r["model"]["scale_c"], 50.0);
    assert_eq!(r["eval"]["m_list"], serde_json::json!([2, 3]));
    assert_eq!(r["model"]["inject_every"], 1);
}
