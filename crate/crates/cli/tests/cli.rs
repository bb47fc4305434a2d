//! Exit codes and end-to-end runs of the `mpma` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mpma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpma")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 12] = [
    "--d", "16", "--heads", "2", "--depth_enc_v", "1", "--batch_size", "4", "--memory_slots", "4", "--mlp_ratio", "2",
];

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&mpma(&["--help"])), 0);
    assert_eq!(code(&mpma(&["train", "--help"])), 0);
    assert_eq!(code(&mpma(&[])), 1);
    assert_eq!(code(&mpma(&["no-such-command"])), 1);
    assert_eq!(code(&mpma(&["gen-corpus", "--out", "x"])), 1);
    assert_eq!(code(&mpma(&["probe", "--checkpoint", "a", "--corpus", "b", "--task", "sing"])), 1);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = mpma(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    assert!(text(&ok).contains("fusion.mem_t"));
    let bad = mpma(&["gradcheck", "--corrupt-group", "dec_v.head.w"]);
    assert_eq!(code(&bad), 2, "{}", text(&bad));
    assert!(text(&bad).contains("FAIL"));
    assert_eq!(code(&mpma(&["gradcheck", "--d", "64", "--heads", "2"])), 1);
    let late = mpma(&["gradcheck", "--tau2", "0.2", "--corrupt-group", "pos_t"]);
    assert_eq!(code(&late), 2, "{}", text(&late));
}

#[test]
fn corpus_train_probe_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let o = mpma(&["gen-corpus", "--out", p(&corpus), "--seed", "1", "--count", "20"]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let mut args = vec!["train", "--seed", "2", "--out", p(&run), "--corpus", p(&corpus), "--steps", "3"];
    args.extend(SMALL);
    let o = mpma(&args);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);

    let o = mpma(&["train", "--seed", "2", "--out", p(&run), "--corpus", p(&corpus), "--steps", "5", "--resume", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 5);

    let o = mpma(&["probe", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--task", "retrieve"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"task\":\"retrieve\""));
    let o = mpma(&["probe", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--task", "classify", "--label-fraction", "0.5"]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let rec = dir.path().join("rec");
    let o = mpma(&["reconstruct", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--k", "2", "--out", p(&rec)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(rec.join("sample_0001_recon.bin").exists());
}

#[test]
fn training_failures() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&mpma(&["gen-corpus", "--out", p(&corpus), "--seed", "1", "--count", "8"])), 0);
    let run = dir.path().join("run");

    let mut args = vec!["train", "--seed", "2", "--out", p(&run), "--corpus", p(&corpus), "--steps", "3", "--tau1", "1e-300"];
    args.extend(SMALL);
    let o = mpma(&args);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(run.join("model.nan.ckpt").exists());

    // no seed
    assert_eq!(code(&mpma(&["train", "--corpus", p(&corpus)])), 1);
    // unknown key
    assert_eq!(code(&mpma(&["train", "--seed", "1", "--corpus", p(&corpus), "--colour", "red"])), 1);
    // missing corpus
    let missing = dir.path().join("none");
    assert_eq!(code(&mpma(&["train", "--seed", "1", "--corpus", p(&missing)])), 1);
}
