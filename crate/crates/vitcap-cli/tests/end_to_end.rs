//! Drives the binary through the full workflow on a small synthetic
//! dataset: generate, build vocabulary, train both stages, caption,
//! evaluate, extract concepts, and dump attention, checking outputs and
//! exit codes along the way.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vitcap"))
}

fn run_ok(args: &[&str], dir: &Path) -> String {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "vitcap {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(!out.status.success(), "vitcap {args:?} unexpectedly passed");
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

fn last_json_line(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().last().expect("stdout has output");
    serde_json::from_str(line).expect("stdout line is JSON")
}

/// Model sections small enough to train in seconds.
fn model_json() -> String {
    r#"
    "encoder": {"image_height": 8, "image_width": 8, "patch_size": 4,
                "dim": 8, "depth": 2, "split_depth": 1, "heads": 2, "mlp_ratio": 2},
    "ctn": {"depth": 1, "heads": 2, "mlp_ratio": 2, "head_hidden": 8, "top_k": 3},
    "decoder": {"depth": 1, "heads": 2, "mlp_ratio": 2, "max_caption_len": 12, "mask_prob": 0.15}
    "#
    .to_string()
}

fn write_config(dir: &Path, name: &str, train: &str, out_dir: &str) -> PathBuf {
    let body = format!(
        r#"{{ {model},
        "train": {train},
        "data": {{"manifest": "data/manifest.jsonl", "vocab": "vocab.txt",
                  "concept_mode": "keywords", "out_dir": "{out_dir}"}} }}"#,
        model = model_json(),
    );
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn full_workflow_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Dataset and vocabulary.
    let out = run_ok(
        &[
            "gen-synthetic",
            "--n",
            "6",
            "--seed",
            "5",
            "--image-size",
            "8",
            "--val-fraction",
            "0.34",
            "--out",
            "data",
        ],
        dir,
    );
    let gen = last_json_line(&out);
    assert_eq!(gen["images"], 6);
    assert!(gen["val"].as_u64().unwrap() >= 1);
    let out = run_ok(
        &[
            "build-vocab",
            "--manifest",
            "data/manifest.jsonl",
            "--min-count",
            "1",
            "--out",
            "vocab.txt",
        ],
        dir,
    );
    assert!(last_json_line(&out)["tokens"].as_u64().unwrap() > 5);

    // Stage one.
    write_config(dir, "stage1.json", r#"{"max_steps": 6, "batch_size": 4, "seed": 3, "base_lr": 0.001}"#, "run1");
    let out = run_ok(&["train-concepts", "--config", "stage1.json"], dir);
    let s1 = last_json_line(&out);
    assert_eq!(s1["steps"], 6);
    assert!(dir.join("run1/concepts.vtck").exists());
    assert!(dir.join("run1/resolved.json").exists());
    let log = std::fs::read_to_string(dir.join("run1/loss.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["l_vc"].as_f64().unwrap() > 0.0);
    assert_eq!(first["l_cap"], 0.0);

    // Rerunning from the echoed config reproduces the checkpoint exactly.
    let out = run_ok(
        &[
            "train-concepts",
            "--config",
            "run1/resolved.json",
            "--out",
            "run1b",
        ],
        dir,
    );
    last_json_line(&out);
    let a = std::fs::read(dir.join("run1/concepts.vtck")).unwrap();
    let b = std::fs::read(dir.join("run1b/concepts.vtck")).unwrap();
    assert_eq!(a, b, "same resolved config must give identical checkpoints");

    // Stage two, first without then with a teacher.
    write_config(dir, "stage2.json", r#"{"stage": "joint", "max_steps": 6, "batch_size": 4, "seed": 3, "base_lr": 0.001}"#, "run2");
    let out = run_ok(
        &[
            "train-caption",
            "--config",
            "stage2.json",
            "--init",
            "run1/concepts.vtck",
        ],
        dir,
    );
    last_json_line(&out);
    assert!(dir.join("run2/caption.vtck").exists());
    let log = std::fs::read_to_string(dir.join("run2/loss.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["l_cap"].as_f64().unwrap() > 0.0);
    assert_eq!(first["l_dis"], 0.0);
    assert_eq!(first["lr"]["stem"].as_f64().unwrap(), 0.0001);
    assert_eq!(first["lr"]["decoder"].as_f64().unwrap(), 0.001);

    write_config(dir, "stage2kd.json", r#"{"stage": "joint", "max_steps": 2, "batch_size": 4, "seed": 3}"#, "run2kd");
    run_ok(
        &[
            "train-caption",
            "--config",
            "stage2kd.json",
            "--init",
            "run1/concepts.vtck",
            "--teacher",
            "run2/caption.vtck",
        ],
        dir,
    );
    let log = std::fs::read_to_string(dir.join("run2kd/loss.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["l_dis"].as_f64().unwrap() > 0.0);
    let resolved = std::fs::read_to_string(dir.join("run2kd/resolved.json")).unwrap();
    assert!(resolved.contains("caption.vtck"), "teacher choice is echoed");

    // Captioning: greedy, and beam width one must match it.
    let out = run_ok(
        &[
            "caption",
            "--ckpt",
            "run2/caption.vtck",
            "--image",
            "data/images/img00000.ppm",
        ],
        dir,
    );
    let greedy = last_json_line(&out);
    assert!(greedy["caption"].is_string());
    assert_eq!(greedy["concepts"].as_array().unwrap().len(), 3);
    let out = run_ok(
        &[
            "caption",
            "--ckpt",
            "run2/caption.vtck",
            "--image",
            "data/images/img00000.ppm",
            "--beam",
            "1",
        ],
        dir,
    );
    let beam = last_json_line(&out);
    assert_eq!(beam["caption"], greedy["caption"]);

    // Evaluation over the validation split.
    let out = run_ok(
        &[
            "evaluate",
            "--ckpt",
            "run2/caption.vtck",
            "--manifest",
            "data/manifest.jsonl",
            "--split",
            "val",
            "--out",
            "evald",
        ],
        dir,
    );
    let metrics = last_json_line(&out);
    for key in ["bleu4", "consensus", "concept_recall"] {
        assert!(metrics[key].is_f64() || metrics[key].is_u64(), "{key} missing");
    }
    let n = metrics["images"].as_u64().unwrap();
    let items = std::fs::read_to_string(dir.join("evald/items.jsonl")).unwrap();
    assert_eq!(items.lines().count() as u64, n);
    let disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("evald/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(disk["bleu4"], metrics["bleu4"]);

    // Concept labels and their frequency table.
    run_ok(
        &[
            "extract-concepts",
            "--manifest",
            "data/manifest.jsonl",
            "--mode",
            "keywords",
            "--out",
            "labels.jsonl",
        ],
        dir,
    );
    let labels = std::fs::read_to_string(dir.join("labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 6);
    let out = run_ok(
        &["concept-stats", "--labels", "labels.jsonl", "--out", "stats.tsv"],
        dir,
    );
    let stats = last_json_line(&out);
    let tsv = std::fs::read_to_string(dir.join("stats.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "token\tcount\tshare\tcumulative");
    assert_eq!(tsv.lines().count() as u64, stats["distinct"].as_u64().unwrap() + 1);
    let counts: Vec<usize> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "sorted by count");
    assert_eq!(
        counts.iter().sum::<usize>() as u64,
        stats["instances"].as_u64().unwrap()
    );

    // Attention dump: one layer plus the mean makes exactly two files.
    run_ok(
        &[
            "attn-dump",
            "--ckpt",
            "run2/caption.vtck",
            "--image",
            "data/images/img00000.ppm",
            "--layers",
            "1",
            "--out",
            "attn",
        ],
        dir,
    );
    let mut files: Vec<String> = std::fs::read_dir(dir.join("attn"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["layer1.pgm", "mean.pgm"]);
    let pgm = std::fs::read(dir.join("attn/layer1.pgm")).unwrap();
    assert_eq!(&pgm[..3], b"P5\n");
    assert_eq!(pgm.iter().max(), Some(&255u8), "peak scaled to white");
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(
        &["gen-synthetic", "--n", "4", "--image-size", "8", "--val-fraction", "0.0", "--out", "data"],
        dir,
    );
    run_ok(
        &["build-vocab", "--manifest", "data/manifest.jsonl", "--out", "vocab.txt"],
        dir,
    );

    // Unknown config key: configuration error.
    std::fs::write(dir.join("bad.json"), r#"{"train": {"learning_rate": 1.0}}"#).unwrap();
    let out = run_err(&["train-concepts", "--config", "bad.json"], dir);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    // A joint-stage config fed to the concept stage: configuration error.
    write_config(dir, "wrong_stage.json", r#"{"stage": "joint", "max_steps": 1}"#, "runx");
    let out = run_err(&["train-concepts", "--config", "wrong_stage.json"], dir);
    assert_eq!(exit_code(&out), 2);

    // Missing manifest: data error.
    write_config(dir, "ok.json", r#"{"max_steps": 1, "batch_size": 2}"#, "runy");
    let out = run_err(
        &["train-concepts", "--config", "ok.json", "--manifest", "nope.jsonl"],
        dir,
    );
    assert_eq!(exit_code(&out), 3);

    // Missing required flag: usage error from the parser.
    let out = run_err(&["caption", "--ckpt", "x.vtck"], dir);
    assert_eq!(exit_code(&out), 2);

    // Missing checkpoint file: data error.
    let out = run_err(
        &["caption", "--ckpt", "x.vtck", "--image", "data/images/img00000.ppm"],
        dir,
    );
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn stale_vocabulary_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(
        &["gen-synthetic", "--n", "4", "--image-size", "8", "--val-fraction", "0.0", "--out", "data"],
        dir,
    );
    run_ok(
        &["build-vocab", "--manifest", "data/manifest.jsonl", "--out", "vocab.txt"],
        dir,
    );
    write_config(dir, "stage1.json", r#"{"max_steps": 2, "batch_size": 2, "seed": 1}"#, "run1");
    run_ok(&["train-concepts", "--config", "stage1.json"], dir);

    // Grow the vocabulary after stage one; stage two must refuse the pair.
    let mut vocab = std::fs::read_to_string(dir.join("vocab.txt")).unwrap();
    vocab.push_str("zebra\n");
    std::fs::write(dir.join("vocab.txt"), vocab).unwrap();
    write_config(dir, "stage2.json", r#"{"stage": "joint", "max_steps": 2}"#, "run2");
    let out = run_err(
        &["train-caption", "--config", "stage2.json", "--init", "run1/concepts.vtck"],
        dir,
    );
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}
