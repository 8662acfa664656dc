use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motif_core::checkpoint::Checkpoint;
use motif_core::moc::Ablation;
use serde_json::Value;

const CONFIG: &str = r#"{
    "seed": 5,
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_head": 8, "d_ff": 32, "max_len": 300,
              "input_dim": 59, "mod_rank": 4, "freq_dim": 8},
    "pretrain": {"l_max": 32, "optim": {"total_steps": 6, "batch_size": 2, "warmup_steps": 2}},
    "finetune": {"l_max": 32, "optim": {"total_steps": 6, "batch_size": 2, "warmup_steps": 2}},
    "moc": {"d_m": 8, "pool_size": 3, "d_c": 16},
    "sample": {"sampler": {"n_steps": 4}, "length": 20},
    "eval": {"replicates": 3, "r_precision_pool": 3},
    "encoder": {"steps": 5, "batch_size": 4, "hidden": 8},
    "synth": {"n_clips": 4, "min_frames": 20, "max_frames": 30, "n_pairs": 6, "n_heldout": 3, "pair_frames": 24},
    "checkpoint_every": 3,
    "stub_embedder": true
}"#;

fn motif(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motif")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = motif(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    motif(dir, args).status.code().expect("exit code")
}

/// Config, synthetic data, a pre-trained backbone and a ControlNet.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(d, &["synth", "--config", "cfg.json", "--serial", "--out", "syn"]);
    ok(d, &["pretrain", "--config", "cfg.json", "--serial", "--data", "syn/motions", "--out", "pre"]);
    ok(d, &["finetune", "--config", "cfg.json", "--serial", "--pairs", "syn/pairs", "--checkpoint", "pre/pretrain.omgc", "--out", "ft"]);
    tmp
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn sample_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["sample", "--config", "cfg.json", "--serial", "--controlnet", "ft/controlnet.omgc", "--out", out];
    a.extend_from_slice(extra);
    a
}

#[test]
fn every_command_is_reproducible_with_serial() {
    let (a, b) = (workspace(), workspace());
    for d in [a.path(), b.path()] {
        ok(d, &sample_args("gen", &["--prompt", "a person walk then kick", "--count", "2"]));
        ok(d, &["train-encoder", "--config", "cfg.json", "--serial", "--pairs", "syn/pairs", "--out", "enc"]);
        ok(
            d,
            &["eval", "--config", "cfg.json", "--serial", "--generated", "gen", "--reference", "syn/heldout", "--encoder", "enc/encoder.json", "--out", "ev"],
        );
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 30);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{k} differs");
    }
}

#[test]
fn zero_guidance_equals_unconditional_sampling() {
    let w = workspace();
    let d = w.path();
    ok(d, &sample_args("s0", &["--prompt", "a person spin then wave", "--s", "0"]));
    ok(d, &sample_args("un", &["--unconditional"]));
    ok(d, &sample_args("s1", &["--prompt", "a person spin then wave", "--s", "4.5"]));
    let s0 = fs::read(d.join("s0/sample_000.omgm")).unwrap();
    assert_eq!(s0, fs::read(d.join("un/sample_000.omgm")).unwrap());
    assert_ne!(s0, fs::read(d.join("s1/sample_000.omgm")).unwrap());
}

#[test]
fn sample_writes_count_files_and_manifest() {
    let w = workspace();
    let d = w.path();
    ok(d, &sample_args("gen", &["--prompt", "a person jump then run", "--count", "3", "--length", "300", "--steps", "2", "--dump-csv"]));
    let m: Value = serde_json::from_slice(&fs::read(d.join("gen/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["files"].as_array().unwrap().len(), 3);
    assert_eq!(m["length"], 300);
    assert_eq!(m["s"], 4.5);
    assert!(m["checkpoints"]["controlnet"].as_str().unwrap().len() == 64);
    let bodies: Vec<Vec<u8>> = (0..3).map(|i| fs::read(d.join(format!("gen/sample_{i:03}.omgm"))).unwrap()).collect();
    assert!(bodies[0] != bodies[1] && bodies[1] != bodies[2]);
    let seq = motif_core::data::MotionSequence::from_bytes(&bodies[0]).unwrap();
    assert_eq!(seq.frames.nrows(), 300);
    let csv = fs::read_to_string(d.join("gen/sample_000.csv")).unwrap();
    assert!(csv.starts_with("frame,root_height,j1_x"));
    assert_eq!(csv.lines().count(), 301);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let w = workspace();
    let d = w.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--serial", "--data", "syn/motions", "--resume", "pre/pretrain_step000003.omgc", "--out", "pre2"]);
    assert_eq!(fs::read(d.join("pre/pretrain.omgc")).unwrap(), fs::read(d.join("pre2/pretrain.omgc")).unwrap());
    ok(
        d,
        &["finetune", "--config", "cfg.json", "--serial", "--pairs", "syn/pairs", "--checkpoint", "pre/pretrain.omgc", "--resume", "ft/finetune_step000003.omgc", "--out", "ft2"],
    );
    assert_eq!(fs::read(d.join("ft/controlnet.omgc")).unwrap(), fs::read(d.join("ft2/controlnet.omgc")).unwrap());
}

#[test]
fn ablation_is_recorded_in_the_checkpoint() {
    let w = workspace();
    let d = w.path();
    ok(
        d,
        &["finetune", "--config", "cfg.json", "--serial", "--pairs", "syn/pairs", "--checkpoint", "pre/pretrain.omgc", "--ablation", "no-attn-mask", "--steps", "2", "--out", "abl"],
    );
    let ck = Checkpoint::load(d.join("abl/controlnet.omgc")).unwrap();
    assert_eq!(ck.meta.ablation, Some(Ablation::NoAttnMask));
    assert!(!ck.controlnet().unwrap().moc_config().use_attention_mask);
    let base = Checkpoint::load(d.join("ft/controlnet.omgc")).unwrap();
    assert_eq!(base.meta.ablation, Some(Ablation::None));
    let cfg: Value = serde_json::from_slice(&fs::read(d.join("abl/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["ablation"], "no-attn-mask");
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let w = workspace();
    let d = w.path();
    fs::write(d.join("bad.json"), r#"{"seeed": 1}"#).unwrap();
    assert_eq!(code(d, &["synth", "--config", "bad.json"]), 2);
    assert_eq!(code(d, &sample_args("x", &[])), 2, "no prompt");
    assert_eq!(code(d, &sample_args("x", &["--prompt", "a person walk", "--length", "301"])), 2);
    assert_eq!(code(d, &["pretrain", "--config", "cfg.json", "--data", "missing"]), 3);
    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(d, &["pretrain", "--config", "cfg.json", "--data", "empty"]), 3);

    fs::write(d.join("high_lr.json"), CONFIG.replace(r#""total_steps": 6,"#, r#""total_steps": 6, "lr": 1e30,"#)).unwrap();
    assert_eq!(code(d, &["pretrain", "--config", "high_lr.json", "--data", "syn/motions", "--out", "div"]), 4);

    let mut bytes = fs::read(d.join("ft/controlnet.omgc")).unwrap();
    let mid = bytes.len() / 2;
    bytes.truncate(mid);
    fs::write(d.join("broken.omgc"), bytes).unwrap();
    assert_eq!(code(d, &sample_args("x", &["--prompt", "a person walk"]).iter().map(|a| if *a == "ft/controlnet.omgc" { "broken.omgc" } else { a }).collect::<Vec<_>>()), 5);
    assert_eq!(code(d, &["sample", "--config", "cfg.json", "--checkpoint", "ft/controlnet.omgc", "--unconditional"]), 5);

    let table = fixture("two_prompts.omge");
    let table = table.to_str().unwrap();
    assert_eq!(code(d, &["train-encoder", "--pairs", "syn/pairs", "--embeddings", table]), 6);
}

#[test]
fn eval_reports_metrics_with_intervals() {
    let w = workspace();
    let d = w.path();
    ok(d, &sample_args("gen", &["--prompt", "a person walk then kick", "--count", "4"]));
    ok(d, &["eval", "--config", "cfg.json", "--generated", "gen", "--reference", "syn/heldout", "--out", "ev"]);
    let m: Value = serde_json::from_slice(&fs::read(d.join("ev/metrics.json")).unwrap()).unwrap();
    let names: Vec<&str> = m["records"].as_array().unwrap().iter().map(|r| r["metric"].as_str().unwrap()).collect();
    assert_eq!(names, ["diversity", "fid"]);
    for r in m["records"].as_array().unwrap() {
        assert_eq!(r["replicates"], 3);
        assert!(r["value"].as_f64().unwrap().is_finite());
        assert!(r["ci95"].as_f64().unwrap() >= 0.0);
    }
    assert!(m["skipped"]["text"].is_string());
}
