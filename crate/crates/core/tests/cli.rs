use std::path::Path;
use std::process::{Command, Output};

fn asr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpusgen(dir: &Path) {
    let cfg = dir.join("gen.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 4, "vocab_size": 5, "n_utterances": 10, "max_words": 3}"#,
    )
    .unwrap();
    let out = asr(&["corpusgen", "--config", s(&cfg), "--out-dir", s(&dir.join("corpus"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(asr(&[]).status.code(), Some(1));
    assert_eq!(asr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(asr(&["decode", "--ckpt", "x"]).status.code(), Some(1));
    assert_eq!(asr(&["gradcheck", "--seeds", "many"]).status.code(), Some(1));
    assert_eq!(asr(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 3}"#).unwrap();
    let out = asr(&["train", "--config", s(&cfg), "--manifest", "m.jsonl", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = asr(&[
        "features",
        s(&dir.path().join("missing.wav")),
        "--out",
        s(&dir.path().join("f.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, "{\"id\": \"a\", \"audio\": \"a.wav\", \"text\": \"baba\"}\n").unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, "{}").unwrap();
    let out = asr(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a.wav"));
}

#[test]
fn features_writes_a_matrix() {
    let dir = tempfile::tempdir().unwrap();
    corpusgen(dir.path());
    let f = dir.path().join("f.bin");
    let out = asr(&[
        "features",
        s(&dir.path().join("corpus/wavs/utt00000.wav")),
        "--out",
        s(&f),
    ]);
    assert!(out.status.success());
    let m = shona_asr::pipeline::load_features(&f).unwrap();
    assert_eq!(m.cols, 39);
    assert!(m.rows > 0);
}

#[test]
fn train_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpusgen(d);
    let cfg = d.join("train.json");
    std::fs::write(&cfg, r#"{"epochs_max": 2, "patience": 1}"#).unwrap();
    let (ckpt, manifest) = (d.join("m.ckpt"), d.join("corpus/manifest.jsonl"));
    let out = asr(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&ckpt),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(shona_asr::pipeline::Checkpoint::load(&ckpt).unwrap().config.seed, 5);

    let wav = d.join("corpus/wavs/utt00001.wav");
    let out = asr(&[
        "decode",
        "--ckpt",
        s(&ckpt),
        "--wav",
        s(&wav),
        "--lm-weight",
        "0",
        "--beam",
        "4",
    ]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
    assert_eq!(
        asr(&["decode", "--ckpt", s(&ckpt), "--wav", s(&wav), "--beam", "0"])
            .status
            .code(),
        Some(1)
    );

    let (report, hyp) = (d.join("eval.json"), d.join("hyp.txt"));
    let out = asr(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--split",
        "test",
        "--report",
        s(&report),
        "--hyp",
        s(&hyp),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "n_ref_phones",
            "n_ref_words",
            "n_utts",
            "per",
            "sentence_accuracy",
            "ser",
            "wer",
            "word_accuracy"
        ]
    );
    assert_eq!(v["n_utts"], 1);
    let lines = std::fs::read_to_string(&hyp).unwrap();
    assert_eq!(lines.lines().count(), 1);
    assert!(lines.contains('\t'));
    assert!(String::from_utf8_lossy(&out.stdout).contains("greedy"));
}

#[test]
fn gradcheck_passes() {
    let out = asr(&["gradcheck", "--seeds", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 9);
}
