//! End-to-end runs of the `gemma2` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use gemma2_core::model::Checkpoint;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gemma2"))
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/tiny")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_with_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = bin().args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn tiny_model() -> Value {
    json!({
        "d_model": 16, "n_layers": 2, "n_heads": 2, "n_kv_heads": 1, "head_size": 8,
        "ff_dim": 32, "vocab_size": 261, "window_size": 8, "global_span": 32
    })
}

fn train_config(steps: usize) -> Value {
    json!({
        "train": { "model": tiny_model(), "steps": steps, "seq_len": 32, "batch_size": 2, "warmup_steps": steps.min(5), "eval_chunks": 8 },
        "corpus": { "synthetic": { "seed": 1, "documents": 60 } }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_one_checkpoint_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(50));
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpts: Vec<_> = fs::read_dir(out.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 50);
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    for key in ["command", "config", "corpus_hash", "code_version", "seed", "out_dir"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["train"]["seed"], 3);
}

#[test]
fn rerunning_a_manifest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(20));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&a)])), 0);
    let o = run(&["train", "--config", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = "checkpoints/step-000020.g2ckpt";
    for f in ["metrics.jsonl", ckpt] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // The evaluation on top of it is reproducible too.
    let eval = json!({ "checkpoint": s(&a.join(ckpt)), "corpus": { "synthetic": { "seed": 1, "documents": 60 } } });
    let eval_cfg = write_json(dir.path(), "eval.json", &eval);
    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    assert_eq!(code(&run(&["eval", "--config", s(&eval_cfg), "--out", s(&ea)])), 0);
    assert_eq!(code(&run(&["eval", "--config", s(&ea.join("manifest.json")), "--out", s(&eb)])), 0);
    assert_eq!(fs::read(ea.join("eval.json")).unwrap(), fs::read(eb.join("eval.json")).unwrap());
}

#[test]
fn manifest_for_another_command_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(1));
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let o = run(&["eval", "--config", s(&out.join("manifest.json"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("manifest is for `train`"));
}

#[test]
fn distill_without_teacher_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_config(1_000_000);
    cfg["train"]["loss"] = json!({ "mode": "distill" });
    let path = write_json(dir.path(), "distill.json", &cfg);
    let out = dir.path().join("run");
    let t0 = Instant::now();
    let o = run(&["distill", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("teacher"), "{}", stderr(&o));
    assert!(t0.elapsed() < Duration::from_secs(10));
    assert!(!out.join("checkpoints").exists());

    // A teacher path that does not exist is caught just as early.
    cfg["train"]["loss"]["teacher"] = json!("missing.g2ckpt");
    let path = write_json(dir.path(), "distill.json", &cfg);
    assert_eq!(code(&run(&["distill", "--config", s(&path), "--out", s(&out)])), 1);
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn unknown_ablation_lists_the_valid_names() {
    let o = run(&["ablate", "bogus"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for name in gemma2_core::eval::ABLATIONS {
        assert!(err.contains(name), "usage lacks {name}: {err}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent/train.json"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_config(1);
    cfg["train"]["stepz"] = json!(1);
    let path = write_json(dir.path(), "bad.json", &cfg);
    assert_eq!(code(&run(&["train", "--config", s(&path)])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn corrupt_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.g2ckpt");
    let mut bytes = fs::read(assets().join("tiny.g2ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&bad, bytes).unwrap();
    let cfg = write_json(dir.path(), "eval.json", &json!({ "checkpoint": "bad.g2ckpt", "corpus": { "synthetic": { "seed": 7, "documents": 20 } } }));
    let o = run(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(1));
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&blocker.join("run"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

const TRANSCRIPT: &str = "user: Knock knock.\nmodel: Who's there?\n";
const GOLDEN: &str = "<bos><start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\nWho's there?<end_of_turn><eos>";

#[test]
fn chatfmt_is_a_pure_filter() {
    let o = run_with_stdin(&["chatfmt", "render"], TRANSCRIPT.as_bytes());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), GOLDEN);
    let o = run_with_stdin(&["chatfmt", "parse"], GOLDEN.as_bytes());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), TRANSCRIPT);
    // A trailing newline from an editor or echo is tolerated.
    let o = run_with_stdin(&["chatfmt", "parse"], format!("{GOLDEN}\n").as_bytes());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), TRANSCRIPT);
}

#[test]
fn chatfmt_parse_errors_exit_nonzero() {
    for bad in ["<bos><start_of_turn>robot\nhi<end_of_turn>", "<bos><start_of_turn>user\nhi", "<bos><start_of_turn>user\nhi<end_of_turn><eos>"] {
        let o = run_with_stdin(&["chatfmt", "parse"], bad.as_bytes());
        assert_eq!(code(&o), 1, "{bad:?}");
        assert!(o.stdout.is_empty());
        assert!(stderr(&o).contains("parse error"), "{}", stderr(&o));
    }
    let o = run_with_stdin(&["chatfmt", "render"], b"robot: hi\n");
    assert_eq!(code(&o), 1);
}

#[test]
fn window_sweep_on_the_bundled_checkpoint_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let o = run(&["ablate", "window_sweep", "--config", s(&assets().join("window_sweep.json")), "--out", s(dir.path())]);
    let took = t0.elapsed();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(took < Duration::from_secs(60), "took {took:?}");
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("window_sweep.json")).unwrap()).unwrap();
    let arms = report["arms"].as_array().unwrap();
    let labels: Vec<&str> = arms.iter().map(|a| a["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["window 16", "window 8", "window 4"]);
    assert_eq!(arms[0]["metrics"]["rel_change"], 0.0);
    assert!(fs::read_to_string(dir.path().join("window_sweep.txt")).unwrap().contains("cache_floats"));
}

#[test]
fn eval_matches_the_sweep_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (e, w) = (dir.path().join("e"), dir.path().join("w"));
    let cfg = write_json(
        dir.path(),
        "eval.json",
        &json!({ "checkpoint": s(&assets().join("tiny.g2ckpt")), "corpus": { "synthetic": { "seed": 7, "documents": 200 } }, "split": { "eval_chunks": 64 } }),
    );
    assert_eq!(code(&run(&["eval", "--config", s(&cfg), "--out", s(&e)])), 0);
    assert_eq!(code(&run(&["ablate", "window_sweep", "--config", s(&assets().join("window_sweep.json")), "--out", s(&w)])), 0);
    let read = |p: PathBuf| serde_json::from_slice::<Value>(&fs::read(p).unwrap()).unwrap();
    let eval_ppl = read(e.join("eval.json"))["arms"][0]["metrics"]["val_ppl"].as_f64().unwrap();
    let sweep_ppl = read(w.join("window_sweep.json"))["arms"][0]["metrics"]["val_ppl"].as_f64().unwrap();
    assert_eq!(eval_ppl, sweep_ppl);
}

#[test]
fn bundled_checkpoint_is_reproducible_from_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", s(&assets().join("train.json")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fresh = Checkpoint::load(&dir.path().join("checkpoints/step-001500.g2ckpt")).unwrap();
    let bundled = Checkpoint::load(&assets().join("tiny.g2ckpt")).unwrap();
    assert_eq!(fresh.params().unwrap(), bundled.params().unwrap());
}

#[test]
fn merging_copies_returns_the_same_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = assets().join("tiny.g2ckpt");
    let cfg = write_json(dir.path(), "merge.json", &json!({ "inputs": [s(&ckpt), s(&ckpt)] }));
    let o = run(&["merge", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let merged = Checkpoint::load(&dir.path().join("merged.g2ckpt")).unwrap().params().unwrap();
    assert_eq!(merged, Checkpoint::load(&ckpt).unwrap().params().unwrap());
    let bad = write_json(dir.path(), "bad.json", &json!({ "inputs": [s(&ckpt)], "weights": [0.5, 0.5] }));
    assert_eq!(code(&run(&["merge", "--config", s(&bad), "--out", s(dir.path())])), 1);
}

#[test]
fn memorize_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "memorize.json",
        &json!({
            "checkpoint": s(&assets().join("tiny.g2ckpt")),
            "corpus": { "synthetic": { "seed": 7, "documents": 40 } },
            "audit": { "prompt_len": 20, "continuation_len": 20, "sample_count": 30 }
        }),
    );
    let o = run(&["memorize", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("memorization.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["total"], 30);
    assert_eq!(report["config"]["seed"], 5);
    assert!(report["overall"]["exact"].as_u64().unwrap() <= report["overall"]["approx"].as_u64().unwrap());
    assert!(fs::read_to_string(dir.path().join("memorization.txt")).unwrap().contains("exact"));

    // Prompt plus continuation longer than the model's context is a config error.
    let long = write_json(
        dir.path(),
        "long.json",
        &json!({ "checkpoint": s(&assets().join("tiny.g2ckpt")), "corpus": { "synthetic": { "seed": 7, "documents": 40 } } }),
    );
    assert_eq!(code(&run(&["memorize", "--config", s(&long), "--out", s(dir.path())])), 1);
}
