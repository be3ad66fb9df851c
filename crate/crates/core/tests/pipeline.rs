use std::path::Path;

use shona_asr::augment::AugmentPolicy;
use shona_asr::corpusgen::{generate_corpus, GenConfig};
use shona_asr::pipeline::{
    evaluate, load_manifest, split_corpus, train, Checkpoint, Recognizer, Schedule, TrainConfig, WarmStartConfig,
};
use shona_asr::AsrError;

fn corpus(dir: &Path, seed: u64) -> shona_asr::pipeline::Manifest {
    let gen = GenConfig {
        seed,
        vocab_size: 6,
        n_utterances: 10,
        max_words: 3,
        ..GenConfig::default()
    };
    generate_corpus(&gen, dir).unwrap();
    load_manifest(dir.join("manifest.jsonl")).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_max: epochs,
        patience: 2,
        augment: AugmentPolicy::disabled(),
        ..TrainConfig::default()
    }
}

#[test]
fn train_save_load_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1);
    let out = train(&quick(3), &m).unwrap();
    let r = &out.report;
    assert_eq!((r.n_train, r.n_val, r.n_test), (8, 1, 1));
    assert!(!r.epochs.is_empty() && r.epochs.len() <= 3);
    assert!((1..=r.epochs.len()).contains(&r.best_epoch));
    assert!(r.epochs.iter().all(|e| e.train_ctc.is_some_and(f64::is_finite)));

    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.params.digest_f32(), r.best_digest);
    assert_eq!(ckpt.epoch, r.best_epoch);

    let splits = split_corpus(&m, ckpt.config.split, ckpt.config.seed).unwrap();
    let test_ids: Vec<_> = splits.test.records.iter().map(|x| &x.id).collect();
    let trained_ids: Vec<_> = out.splits.test.records.iter().map(|x| &x.id).collect();
    assert_eq!(test_ids, trained_ids);

    let rec = Recognizer::new(ckpt).unwrap();
    let e = evaluate(&rec, &splits.test, &rec.ckpt.config.decode).unwrap();
    assert_eq!(e.report.n_utts, 1);
    assert_eq!(e.hypotheses.len(), 1);
    assert!((0.0..=1.0).contains(&e.report.ser));
    assert!(e.report.wer >= 0.0 && e.greedy.wer >= 0.0);
}

#[test]
fn separate_schedule_pretrains_the_lm() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 2);
    let cfg = TrainConfig {
        schedule: Schedule::Separate,
        ..quick(2)
    };
    let out = train(&cfg, &m).unwrap();
    assert!(!out.report.lm_epochs.is_empty());
    assert!(out.report.epochs.iter().all(|e| e.train_lm.is_none()));
}

#[test]
fn warm_start_from_a_checkpoint_keeps_frozen_layers() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3);
    let src_path = dir.path().join("source.ckpt");
    train(&quick(1), &m).unwrap().checkpoint.save(&src_path).unwrap();
    // compare against the stored f32 values, not the in-memory f64 ones
    let source = Checkpoint::load(&src_path).unwrap();

    let cfg = TrainConfig {
        seed: 99,
        warm_start: Some(WarmStartConfig {
            checkpoint: src_path,
            freeze: vec!["acoustic.conv1".into()],
        }),
        ..quick(2)
    };
    let out = train(&cfg, &m).unwrap();
    let ws = out.report.warm_start.as_ref().unwrap();
    assert!(ws.reinitialized.is_empty() && ws.ignored.is_empty());
    for name in ["acoustic.conv1.kernels", "acoustic.conv1.bias"] {
        let same = out.checkpoint.params.get(name).unwrap().values == source.params.get(name).unwrap().values;
        assert!(same, "{name} moved");
    }
    let name = "acoustic.conv2.kernels";
    assert!(out.checkpoint.params.get(name).unwrap().values != source.params.get(name).unwrap().values);
}

#[test]
fn missing_warm_start_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 4);
    let cfg = TrainConfig {
        warm_start: Some(WarmStartConfig {
            checkpoint: dir.path().join("absent.ckpt"),
            freeze: Vec::new(),
        }),
        ..quick(1)
    };
    let err = train(&cfg, &m).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn corpus_too_small_to_split() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        vocab_size: 3,
        n_utterances: 3,
        ..GenConfig::default()
    };
    generate_corpus(&gen, dir.path()).unwrap();
    let m = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    assert!(matches!(train(&quick(1), &m), Err(AsrError::Data(_))));
}
