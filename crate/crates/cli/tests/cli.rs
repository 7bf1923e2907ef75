use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use echodiff_core::dataset::load_dataset;
use echodiff_core::io::{read_frames, write_label_png};
use echodiff_core::trainer::{load_checkpoint, read_log};

fn echodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echodiff")).args(args).arg("--log").arg("warn").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root` with its bytes, sorted by relative path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = r#"
[model]
base_width = 8
channel_multipliers = [1, 2]
attention_levels = [1]
attention_head_dim = 8
time_embed_dim = 8
frame_embed_dim = 8
spade_hidden = 8
groups = 4
res_blocks_per_level = 1

[schedule]
steps = 6
scale_with_steps = true

[train]
batch_size = 2
micro_batch = 2
learning_rate = 0.001
frames = 4
checkpoint_every = 1
"#;

fn toy_data(dir: &Path, patients: &str) -> PathBuf {
    let data = dir.join("data");
    ok(echodiff(&["make-toy-data", "--out", s(&data), "--patients", patients, "--frames", "6", "--size", "16", "--seed", "3"]));
    data
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

#[test]
fn help_lists_every_command() {
    let o = ok(echodiff(&["--help"]));
    for c in ["make-toy-data", "convert-camus", "train", "sample", "evaluate"] {
        assert!(stdout(&o).contains(c), "{c}");
    }
    let o = ok(echodiff(&["sample", "--help"]));
    assert!(stdout(&o).contains("default: 7.0"));
}

#[test]
fn toy_data_is_valid_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = ok(echodiff(&["make-toy-data", "--out", s(&a), "--patients", "10", "--frames", "16", "--size", "32", "--seed", "1"]));
    assert!(stdout(&o).contains("10 patients"));
    assert_eq!(load_dataset(&a).unwrap().len(), 10);
    assert!(a.join("resolved_config.toml").exists() && a.join("provenance.json").exists());
    let b = dir.path().join("b");
    ok(echodiff(&["make-toy-data", "--out", s(&b), "--patients", "10", "--frames", "16", "--size", "32", "--seed", "1"]));
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn invalid_size_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = echodiff(&["make-toy-data", "--out", s(&out), "--size", "30"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("multiple of 8"));
    assert!(!out.exists());
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), "3");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = -1.0\ncond_drop_prob = 2.0\n").unwrap();
    let o = echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    for needle in ["learning_rate", "cond_drop_prob", "max_steps"] {
        assert!(e.contains(needle), "{needle} missing from {e}");
    }
    fs::write(&cfg, "[train]\nlerning_rate = 0.1\n").unwrap();
    let o = echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lerning_rate"));
}

#[test]
fn train_resume_sample_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), "3");
    let cfg = config(dir.path(), "");
    let run = dir.path().join("run");
    let o = ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--max-steps", "2"]));
    assert!(stdout(&o).contains("T=6"));
    assert!(run.join("resolved_config.toml").exists());
    ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--max-steps", "3", "--resume"]));
    let log = read_log(&run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);

    // Uninterrupted run reaches the same state.
    let straight = dir.path().join("straight");
    ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight), "--max-steps", "3"]));
    let a = load_checkpoint(&run.join("checkpoint_latest.ckpt")).unwrap();
    let b = load_checkpoint(&straight.join("checkpoint_latest.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    let losses = |p: &Path| read_log(&p.join("train_log.jsonl")).unwrap().iter().map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&run), losses(&straight));

    let rec = &load_dataset(&data).unwrap()[0];
    let map = dir.path().join("map.png");
    write_label_png(&map, &rec.label_ed).unwrap();
    let ckpt = run.join("checkpoint_latest.ckpt");
    let samples = dir.path().join("samples");
    let o = ok(echodiff(&["sample", "--checkpoint", s(&ckpt), "--label-map", s(&map), "--out", s(&samples), "--n", "3", "--no-preview"]));
    assert!(stdout(&o).contains("s = 7.0"));
    let dirs: Vec<_> = (0..3).map(|i| samples.join(format!("sample_{i:03}"))).collect();
    let clips: Vec<_> = dirs.iter().map(|d| read_frames(d).unwrap()).collect();
    assert_eq!(clips[0].dims(), (4, 1, 16, 16));
    assert_ne!(clips[0], clips[1]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dirs[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["guidance_scale"], 7.0);
    assert_eq!(manifest["map_id"], "map");
    assert!(dirs[0].join("resolved_config.toml").exists());

    let o = echodiff(&["sample", "--checkpoint", s(&ckpt), "--label-map", s(&dir.path().join("nope.png")), "--out", s(&samples)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.png"));

    let eval = dir.path().join("eval");
    let o = ok(echodiff(&[
        "evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval), "--split", "all", "--n-per-map", "2",
        "--extractor", "toy",
    ]));
    let table = stdout(&o);
    for col in ["Cond.", "Model", "K", "FID", "FVD", "SSIM"] {
        assert!(table.contains(col), "{col}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_generated"], 6);
    assert_eq!(report["n_real"], 3);
    assert!(eval.join("provenance.json").exists());

    let o = echodiff(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval), "--extractor", "standard"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frame_command"));
}

#[test]
fn frames_flag_threads_through() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), "2");
    let cfg = config(dir.path(), "");
    let run = dir.path().join("run");
    ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--max-steps", "1", "--frames", "5"]));
    let ck = load_checkpoint(&run.join("checkpoint_latest.ckpt")).unwrap();
    assert_eq!(ck.train.frames, 5);
    let map = dir.path().join("m.png");
    write_label_png(&map, &load_dataset(&data).unwrap()[0].label_ed).unwrap();
    let out = dir.path().join("s");
    ok(echodiff(&["sample", "--checkpoint", s(&run.join("checkpoint_latest.ckpt")), "--label-map", s(&map), "--out", s(&out)]));
    assert_eq!(read_frames(&out.join("sample_000")).unwrap().frames(), 5);
}

#[test]
fn cascade_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), "2");
    let cfg = config(dir.path(), "\n[train.cascade]\nbase_hw = 8\ntarget_hw = 16\nsr_noise_aug_level = 0.1\n");
    let base = dir.path().join("base");
    let sr = dir.path().join("sr");
    ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&base), "--max-steps", "1", "--variant", "cascade_base"]));
    ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&sr), "--max-steps", "1", "--variant", "cascade_sr"]));
    let map = dir.path().join("m.png");
    write_label_png(&map, &load_dataset(&data).unwrap()[0].label_ed).unwrap();
    let out = dir.path().join("s");
    let o = echodiff(&["sample", "--checkpoint", s(&base.join("checkpoint_latest.ckpt")), "--label-map", s(&map), "--out", s(&out), "--cascade"]);
    assert_eq!(o.status.code(), Some(1));
    ok(echodiff(&[
        "sample", "--checkpoint", s(&base.join("checkpoint_latest.ckpt")), "--sr-checkpoint", s(&sr.join("checkpoint_latest.ckpt")),
        "--label-map", s(&map), "--out", s(&out), "--cascade",
    ]));
    assert_eq!(read_frames(&out.join("sample_000")).unwrap().dims(), (4, 1, 16, 16));
}

#[test]
fn condition_mode_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), "2");
    let cfg = config(dir.path(), "");
    let run = dir.path().join("run");
    ok(echodiff(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--max-steps", "1", "--condition-mode", "concat"]));
    let ck = load_checkpoint(&run.join("checkpoint_latest.ckpt")).unwrap();
    assert_eq!(ck.net.condition_mode, echodiff_core::ConditionMode::Concat);
    let o = echodiff(&["train", "--data", s(&data), "--out", s(&run), "--condition-mode", "film"]);
    assert_ne!(o.status.code(), Some(0));
}
