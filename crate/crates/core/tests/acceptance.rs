//! Primary acceptance criteria, one PASS/FAIL line each.
//!
//! Runs sequentially so wall-clock budgets are measured on an otherwise idle
//! process. Pass a substring to run only matching criteria, e.g.
//! `cargo test --test acceptance -- window`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use gemma2_core::audit::{edit_budget, run_audit, AuditConfig};
use gemma2_core::chat::{knock_knock_examples, parse_dialogue, render_dialogue, Dialogue, Role, Turn};
use gemma2_core::corpus::SyntheticSpec;
use gemma2_core::eval::{distill_vs_scratch, gqa_vs_mha, window_sweep, DistillAblation, GqaAblation, NamedModel};
use gemma2_core::model::{build_model, ModelConfig, ModelParams};
use gemma2_core::tensor::{Graph, Tensor};
use gemma2_core::tokenizer::{to_stream_text, SPECIALS};
use gemma2_core::train::{
    distill_loss, distill_loss_grad, entropy, train_run, validation_chunks, RunOptions, TeacherTargets, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

// Pinned tolerances and budgets.
const PARAM_COUNT_BUDGET: Duration = Duration::from_secs(1);
const DISTILL_BUDGET: Duration = Duration::from_secs(30 * 60);
const DISTILL_MIN_STEPS: usize = 5000;
const GQA_MAX_REL_GAP: f64 = 0.02;
const WINDOW_MAX_REL_CHANGE: f64 = 0.02;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-3;
const FD_SEEDS: u64 = 100;
const FD_COORDS_PER_SEED: usize = 60;
const DISTILL_GRAD_TOL: f64 = 1e-6;
const LOGIT_PAIRS: usize = 1000;
const CACHE_TOL: f32 = 1e-4;
const GQA_EQUIV_TOL: f32 = 1e-5;
const FUZZED_DIALOGUES: usize = 1000;
const AUDIT_SAMPLES: usize = 1000;

type Criterion = (&'static str, fn() -> Result<String>);

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("param_counts", param_counts),
        ("distill_beats_scratch", distill_beats_scratch),
        ("gqa_matches_mha", gqa_matches_mha),
        ("window_sweep", window_sweep_is_flat),
        ("numerical_suite", numerical_suite),
        ("architecture_suite", architecture_suite),
        ("chat_formatting", chat_formatting),
        ("memorization_audit", memorization_audit),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(anyhow::anyhow!(
                "panicked: {}",
                p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            )),
        };
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<22} {secs:>8.1}s  {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name:<22} {secs:>8.1}s  {e:#}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn param_counts() -> Result<String> {
    let t0 = Instant::now();
    let expected = [
        ("2B", 590_118_912u64, 2_024_517_888u64),
        ("9B", 917_962_752, 8_324_201_984),
        ("27B", 1_180_237_824, 26_047_480_320),
    ];
    for (name, embedding, non_embedding) in expected {
        let p = ModelConfig::preset(name).context("missing preset")?.count_params();
        ensure!(
            (p.embedding, p.non_embedding) == (embedding, non_embedding),
            "{name}: got {}/{}, want {embedding}/{non_embedding}",
            p.embedding,
            p.non_embedding
        );
    }
    let took = t0.elapsed();
    ensure!(took < PARAM_COUNT_BUDGET, "took {took:?}");
    Ok("2B, 9B and 27B embedding and non-embedding counts exact".into())
}

fn config(d: usize, layers: usize, heads: usize, kv: usize, hs: usize, ff: usize, window: usize, span: usize) -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.d_model = d;
    c.n_layers = layers;
    c.n_heads = heads;
    c.n_kv_heads = kv;
    c.head_size = hs;
    c.ff_dim = ff;
    c.window_size = window;
    c.global_span = span;
    c
}

fn byte_corpus() -> SyntheticSpec {
    SyntheticSpec::new(7, 2000)
}

fn distill_beats_scratch() -> Result<String> {
    let t0 = Instant::now();
    let corpus = byte_corpus().generate()?;
    let mut tc = TrainConfig::new(config(256, 6, 4, 2, 64, 1536, 32, 64), 3000);
    tc.batch_size = 4;
    tc.warmup_steps = 100;
    tc.peak_lr = 3e-3;
    tc.seed = 100;
    tc.eval_chunks = 200;
    let teacher = train_run(&tc, &corpus, RunOptions::default())?.params;
    let teacher_secs = t0.elapsed().as_secs_f64();

    let student = config(96, 4, 4, 2, 24, 640, 32, 64);
    let mut protocol = TrainConfig::new(student.clone(), DISTILL_MIN_STEPS);
    protocol.batch_size = 1;
    protocol.warmup_steps = 200;
    protocol.peak_lr = 3e-3;
    protocol.eval_chunks = 200;
    let ab = DistillAblation { train: protocol, students: vec![NamedModel { label: "student".into(), model: student.clone() }], seeds: vec![0, 1, 2] };
    let targets = TeacherTargets::new(&teacher, 1.0);
    let report = distill_vs_scratch(&ab, &targets, &corpus)?;
    let took = t0.elapsed();

    let (tp, sp) = (tc.model.count_params().total(), student.count_params().total());
    ensure!((4_000_000..=6_000_000).contains(&tp), "teacher has {tp} params");
    ensure!((400_000..=600_000).contains(&sp), "student has {sp} params");
    let mut gaps = Vec::new();
    for seed in &ab.seeds {
        let s = report.metric(&format!("student/seed{seed}/scratch"), "val_ppl").context("scratch arm")?;
        let d = report.metric(&format!("student/seed{seed}/distill"), "val_ppl").context("distill arm")?;
        gaps.push(format!("seed {seed}: {s:.4} -> {d:.4}"));
        ensure!(d < s, "seed {seed}: distilled {d:.4} not below scratch {s:.4}");
    }
    ensure!(took <= DISTILL_BUDGET, "took {took:?}");
    Ok(format!(
        "3/3 seeds; teacher {tp} params ppl {:.4} ({teacher_secs:.0}s), student {sp} params, {DISTILL_MIN_STEPS} steps; {}",
        report.metric("teacher", "val_ppl").unwrap_or(f64::NAN),
        gaps.join(", ")
    ))
}

fn gqa_matches_mha() -> Result<String> {
    let corpus = byte_corpus().generate()?;
    let mut tc = TrainConfig::new(config(64, 4, 4, 2, 16, 256, 32, 64), 4000);
    tc.batch_size = 4;
    tc.warmup_steps = 100;
    tc.peak_lr = 3e-3;
    tc.eval_chunks = 200;
    let ab = GqaAblation { train: tc, seeds: vec![0, 1, 2], decode_tokens: 64, decode_reps: 15 };
    let report = gqa_vs_mha(&ab, &corpus)?;
    let mut parts = Vec::new();
    for seed in &ab.seeds {
        let gap = report.summary[&format!("seed{seed}/rel_ppl_gap")];
        let ratio = report.summary[&format!("seed{seed}/throughput_ratio")];
        parts.push(format!("seed {seed}: gap {:+.2}% tput x{ratio:.2}", 100.0 * gap));
        ensure!(gap.abs() < GQA_MAX_REL_GAP, "seed {seed}: relative ppl gap {gap:+.4}");
        ensure!(ratio >= 1.0, "seed {seed}: GQA decode throughput ratio {ratio:.3} < 1");
    }
    Ok(format!("2 vs 4 KV heads; {}", parts.join(", ")))
}

fn window_sweep_is_flat() -> Result<String> {
    let corpus = byte_corpus().generate()?;
    let mut tc = TrainConfig::new(config(64, 4, 4, 2, 16, 256, 128, 256), 1500);
    tc.seq_len = 256;
    tc.batch_size = 2;
    tc.warmup_steps = 100;
    tc.peak_lr = 3e-3;
    tc.eval_chunks = 100;
    let params = train_run(&tc, &corpus, RunOptions::default())?.params;
    let w = tc.model.window_size;
    let report = window_sweep(&params, &validation_chunks(&corpus, &tc), &[w, w / 2, w / 4], &corpus.content_hash(), 0)?;
    let mut parts = Vec::new();
    for arm in &report.arms {
        let rel = arm.metrics["rel_change"];
        parts.push(format!("{} ppl {:.4} ({:+.2}%)", arm.label, arm.metrics["val_ppl"], 100.0 * rel));
        ensure!(rel.abs() < WINDOW_MAX_REL_CHANGE, "{}: relative change {rel:+.4}", arm.label);
    }
    Ok(parts.join(", "))
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn fd_decoder_seed(seed: u64) -> Result<f64> {
    let mut c = config(8, 2, 2, 1, 4, 12, 3, 8);
    c.vocab_size = 11;
    c.attn_softcap = 0.5;
    c.final_softcap = 0.8;
    c.init_std = 0.5;
    let params = build_model(&c, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let seqs: Vec<Vec<u32>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(0..11)).collect()).collect();
    let batch: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = (0..12).map(|_| rng.random_range(0..11)).collect();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let inputs: Vec<Tensor<f64>> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let loss_of = |ts: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let p = ModelParams::from_named(c.clone(), names.iter().cloned().zip(ts.iter().cloned()).collect())?;
        let view = p.view();
        let mut g = Graph::new();
        let vars = view.register(&mut g, grads);
        let logits = view.forward_graph(&mut g, &vars, &batch, None)?;
        let loss = g.softmax_ce(logits, &targets)?;
        let value = g.value(loss).item().context("scalar loss")?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, vars.all().into_iter().map(|v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect()))
    };
    let (_, analytic) = loss_of(&inputs, true)?;
    let mut probe = inputs.clone();
    let mut worst = 0f64;
    for _ in 0..FD_COORDS_PER_SEED {
        let i = rng.random_range(0..inputs.len());
        let j = rng.random_range(0..inputs[i].numel());
        let x = inputs[i].data()[j];
        probe[i].data_mut()[j] = x + FD_STEP;
        let up = loss_of(&probe, false)?.0;
        probe[i].data_mut()[j] = x - FD_STEP;
        let down = loss_of(&probe, false)?.0;
        probe[i].data_mut()[j] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        ensure!(rel < FD_REL_TOL, "seed {seed}: {}[{j}] analytic {a:e} numeric {numeric:e}", names[i]);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn numerical_suite() -> Result<String> {
    let mut worst_fd = 0f64;
    for seed in 0..FD_SEEDS {
        worst_fd = worst_fd.max(fd_decoder_seed(seed)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_grad, mut min_gibbs) = (0f64, f64::INFINITY);
    for _ in 0..LOGIT_PAIRS {
        let v = rng.random_range(2..40);
        let t: Vec<f64> = (0..v).map(|_| rng.random_range(-8.0..8.0)).collect();
        let s: Vec<f64> = (0..v).map(|_| rng.random_range(-8.0..8.0)).collect();
        let (_, grad) = distill_loss_grad(&Tensor::from_vec(t.clone()), &Tensor::from_vec(s.clone()))?;
        let (pt, ps) = (oracle_softmax(&t), oracle_softmax(&s));
        for k in 0..v {
            worst_grad = worst_grad.max((grad[k] - (ps[k] - pt[k])).abs());
        }
        let ce = distill_loss(&Tensor::from_vec(t.clone()), &Tensor::from_vec(s))?;
        min_gibbs = min_gibbs.min(ce - entropy(&pt));
    }
    ensure!(worst_grad < DISTILL_GRAD_TOL, "distill gradient off by {worst_grad:e}");
    ensure!(min_gibbs >= -1e-12, "cross-entropy below teacher entropy by {:e}", -min_gibbs);
    Ok(format!(
        "decoder FD worst rel {worst_fd:.1e} over {FD_SEEDS} seeds; distill grad worst {worst_grad:.1e}; Gibbs min margin {min_gibbs:.1e} over {LOGIT_PAIRS} pairs"
    ))
}

fn tokens(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..256)).collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn replicate_kv(params: &ModelParams) -> Result<ModelParams> {
    let c = params.config().clone();
    let (group, hs) = (c.group_size(), c.head_size);
    let mut mha = c.clone();
    mha.n_kv_heads = c.n_heads;
    let mut named = Vec::new();
    for (name, t) in params.named() {
        if name.ends_with("attn.k") || name.ends_with("attn.v") {
            let mut data = Vec::with_capacity(t.rows() * c.n_heads * hs);
            for r in 0..t.rows() {
                for h in 0..c.n_heads {
                    data.extend_from_slice(&t.row(r)[(h / group) * hs..][..hs]);
                }
            }
            named.push((name, Tensor::new(vec![t.rows(), c.n_heads * hs], data)?));
        } else {
            named.push((name, t.clone()));
        }
    }
    Ok(ModelParams::from_named(mha, named)?)
}

fn architecture_suite() -> Result<String> {
    // Causality: perturbing token t leaves logits before t bit-identical.
    let params = build_model(&config(32, 4, 4, 2, 8, 64, 4, 24), 1)?;
    let view = params.view();
    let v = params.config().vocab_size;
    for seed in 0..10 {
        let base = tokens(seed, 20);
        let before = view.forward(&base)?;
        for t in [0, 3, 4, 5, 11, 19] {
            let mut changed = base.clone();
            changed[t] = (changed[t] + 1) % 256;
            let after = view.forward(&changed)?;
            ensure!(before.data()[..t * v] == after.data()[..t * v], "seed {seed}: earlier logits moved when token {t} changed");
        }
    }

    // Soft caps: an oversized init drives raw values far past the caps.
    let mut big = config(32, 4, 4, 2, 8, 64, 4, 16);
    big.init_std = 3.0;
    ensure!((big.attn_softcap, big.final_softcap) == (50.0, 30.0), "preset caps changed");
    let bp = build_model(&big, 2)?;
    let (mut max_score, mut max_logit) = (0f32, 0f32);
    for seed in 0..5 {
        let toks = tokens(seed, 16);
        for layer in bp.view().attention_scores(&toks)? {
            for &s in layer.data() {
                ensure!(s > -50.0 && s < 50.0, "attention score {s}");
                max_score = max_score.max(s.abs());
            }
        }
        for &z in bp.view().forward(&toks)?.data() {
            ensure!(z > -30.0 && z < 30.0, "logit {z}");
            max_logit = max_logit.max(z.abs());
        }
    }
    ensure!(max_score > 45.0 && max_logit > 25.0, "caps never engaged");

    // Cached decoding against the full forward, straddling the window.
    let mut worst_cache = 0f32;
    for (window, span) in [(4, 24), (1, 10), (8, 8), (5, 17)] {
        let p = build_model(&config(32, 4, 4, 2, 8, 64, window, span), 3)?;
        let view = p.view();
        for len in [window.saturating_sub(1).max(1), window, window + 1, 2 * window + 1, span] {
            if len > span {
                continue;
            }
            let toks = tokens(len as u64, len);
            let full = view.forward(&toks)?;
            let mut cache = view.new_cache();
            for (i, &t) in toks.iter().enumerate() {
                let step = view.forward_cached(&mut cache, t)?;
                worst_cache = worst_cache.max(max_abs_diff(step.data(), &full.data()[i * v..][..v]));
            }
        }
    }
    ensure!(worst_cache < CACHE_TOL, "cache mismatch {worst_cache:e}");

    // Grouped-query attention with replicated KV heads is plain MHA.
    let mut worst_gqa = 0f32;
    for (heads, kv) in [(4, 2), (4, 1), (4, 4)] {
        let gqa = build_model(&config(32, 4, heads, kv, 8, 64, 4, 16), 5)?;
        let mha = replicate_kv(&gqa)?;
        for seed in 0..4 {
            let toks = tokens(seed, 16);
            worst_gqa = worst_gqa.max(max_abs_diff(gqa.view().forward(&toks)?.data(), mha.view().forward(&toks)?.data()));
        }
    }
    ensure!(worst_gqa < GQA_EQUIV_TOL, "GQA vs MHA {worst_gqa:e}");
    Ok(format!(
        "causal; |score| max {max_score:.4} < 50, |logit| max {max_logit:.4} < 30; cache worst {worst_cache:.1e}; GQA==MHA worst {worst_gqa:.1e}"
    ))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 9] = ["<", ">", "\n", "\\", "_of_turn", "é", "🙂", "knock", " "];
    loop {
        let n = rng.random_range(0..12);
        let s: String = (0..n).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect();
        if !SPECIALS.iter().any(|(_, name)| s.contains(name)) {
            return s;
        }
    }
}

fn chat_formatting() -> Result<String> {
    const GOLDEN: &[u8] = b"<bos><start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\nWho's there?<end_of_turn><eos>";
    const GOLDEN_SECOND: &[u8] = b"<bos><start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\nWho's there?<end_of_turn>\n\
<start_of_turn>user\nGemma.<end_of_turn>\n<start_of_turn>model\nGemma who?<end_of_turn><eos>";
    let (first, second) = knock_knock_examples();
    for (d, golden) in [(&first, GOLDEN), (&second, GOLDEN_SECOND)] {
        let rendered = to_stream_text(&render_dialogue(d, false)?)?;
        ensure!(rendered == golden, "golden mismatch: {:?}", String::from_utf8_lossy(&rendered));
        ensure!(rendered.ends_with(b"<end_of_turn><eos>"), "missing terminal <end_of_turn><eos>");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..FUZZED_DIALOGUES {
        let turns = (0..rng.random_range(1..7))
            .map(|_| Turn { role: if rng.random() { Role::User } else { Role::Model }, text: random_text(&mut rng) })
            .collect();
        let d = Dialogue::new(turns);
        let parsed = parse_dialogue(&render_dialogue(&d, false)?)?;
        ensure!(parsed == d, "dialogue {i} did not round-trip");
    }
    Ok(format!("both golden dialogues exact; parse(render(d)) == d for {FUZZED_DIALOGUES} fuzzed dialogues"))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gemma2"))
}

fn cli(args: &[&str]) -> Result<()> {
    let out = bin().args(args).output()?;
    ensure!(out.status.success(), "gemma2 {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<PathBuf> {
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(path.to_path_buf())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn memorization_audit() -> Result<String> {
    let config = AuditConfig::default();
    ensure!((config.prompt_len, config.continuation_len) == (50, 50), "slice lengths changed");
    ensure!(config.edit_budget() == 5 && edit_budget(0.1, 50) == 5, "edit budget is not 5");

    // Overfit a small model on a corpus with 100 planted canary copies, via the CLI.
    let dir = tempfile::tempdir()?;
    let canary_corpus = json!({ "synthetic": { "seed": 3, "documents": 40, "canary": { "length": 200, "copies": 100 } } });
    let model = json!({
        "d_model": 64, "n_layers": 2, "n_heads": 4, "n_kv_heads": 2, "head_size": 16, "ff_dim": 256,
        "vocab_size": 261, "window_size": 32, "global_span": 128
    });
    let train = write_json(
        &dir.path().join("train.json"),
        &json!({
            "train": { "model": model, "steps": 600, "seq_len": 128, "batch_size": 4, "peak_lr": 0.003, "warmup_steps": 50, "val_fraction": 0.0 },
            "corpus": canary_corpus
        }),
    )?;
    let run = dir.path().join("run");
    cli(&["train", "--config", p(&train), "--out", p(&run)])?;
    let ckpt = run.join("checkpoints/step-000600.g2ckpt");
    let mem = write_json(
        &dir.path().join("memorize.json"),
        &json!({ "checkpoint": p(&ckpt), "corpus": canary_corpus, "audit": { "sample_count": AUDIT_SAMPLES } }),
    )?;
    let out = dir.path().join("audit");
    cli(&["memorize", "--config", p(&mem), "--out", p(&out)])?;
    let report: Value = serde_json::from_slice(&fs::read(out.join("memorization.json"))?)?;
    let canary = &report["per_source"]["canary"];
    let (exact, total) = (canary["exact"].as_u64().context("canary exact")?, canary["total"].as_u64().context("canary total")?);
    ensure!(total > 0 && exact == total, "canary exact rate {exact}/{total}");
    let mut rates: Vec<(&str, &Value)> = report["per_source"].as_object().context("per_source")?.iter().map(|(k, v)| (k.as_str(), v)).collect();
    rates.push(("overall", &report["overall"]));
    for (source, r) in rates {
        ensure!(r["exact"].as_u64() <= r["approx"].as_u64(), "{source}: exact above approx");
    }

    // The same architecture untrained reproduces nothing.
    let model_cfg: ModelConfig = serde_json::from_value(model)?;
    let untrained = build_model(&model_cfg, 0)?;
    let corpus: SyntheticSpec = serde_json::from_value(canary_corpus["synthetic"].clone())?;
    let audit = AuditConfig { sample_count: AUDIT_SAMPLES, ..Default::default() };
    let base = run_audit(&untrained.view(), &corpus.generate()?, &audit)?;
    ensure!(base.overall.total == AUDIT_SAMPLES as u64 && base.overall.exact == 0, "untrained exact {}/{}", base.overall.exact, base.overall.total);
    ensure!(base.overall.exact <= base.overall.approx, "untrained exact above approx");
    Ok(format!(
        "budget 5 edits; canary exact {exact}/{total} (overall {:.3}); untrained exact 0/{AUDIT_SAMPLES}",
        report["overall"]["exact"].as_f64().unwrap_or(0.0) / report["overall"]["total"].as_f64().unwrap_or(1.0)
    ))
}

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = write_json(
        &dir.path().join("train.json"),
        &json!({
            "train": {
                "model": { "d_model": 32, "n_layers": 2, "n_heads": 4, "n_kv_heads": 2, "head_size": 8, "ff_dim": 128,
                           "vocab_size": 261, "window_size": 16, "global_span": 64 },
                "steps": 60, "batch_size": 4, "warmup_steps": 10, "eval_every": 20, "checkpoint_every": 20, "eval_chunks": 32
            },
            "corpus": { "synthetic": { "seed": 5, "documents": 200 } }
        }),
    )?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cli(&["train", "--config", p(&cfg), "--out", p(&a)])?;
    cli(&["train", "--config", p(&a.join("manifest.json")), "--out", p(&b)])?;
    let mut files = vec![PathBuf::from("metrics.jsonl")];
    let mut ckpts: Vec<PathBuf> = fs::read_dir(a.join("checkpoints"))?.map(|e| Ok(PathBuf::from("checkpoints").join(e?.file_name()))).collect::<Result<_>>()?;
    ckpts.sort();
    ensure!(ckpts.len() == 3, "expected 3 checkpoints, found {}", ckpts.len());
    files.extend(ckpts);
    for f in &files {
        ensure!(fs::read(a.join(f))? == fs::read(b.join(f))?, "{} differs between runs", f.display());
    }
    let (ma, mb): (Value, Value) =
        (serde_json::from_slice(&fs::read(a.join("manifest.json"))?)?, serde_json::from_slice(&fs::read(b.join("manifest.json"))?)?);
    ensure!(ma["config"] == mb["config"] && ma["corpus_hash"] == mb["corpus_hash"], "manifests disagree");
    Ok(format!("manifest re-run reproduced metrics.jsonl and {} checkpoints byte for byte", files.len() - 1))
}
