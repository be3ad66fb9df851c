//! Epoch loop: augmentation, CTC and LM updates, validation, early stopping.

use std::collections::BTreeSet;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Schedule, TrainConfig};
use super::container::Checkpoint;
use super::early_stop::{EarlyStopping, Verdict};
use super::manifest::Manifest;
use super::split::{split_corpus, Splits};
use super::warm_start::{warm_start, WarmStartReport};
use crate::acoustic::{acoustic_forward, acoustic_step, build_acoustic_model, PREFIX as ACOUSTIC_PREFIX};
use crate::augment::{spec_augment, speed_perturb, volume_perturb};
use crate::decoder::{g2p, Lexicon, PhoneInventory};
use crate::dsp::{featurize, load_wav, AudioBuffer, FeatureMatrix};
use crate::error::{AsrError, Result};
use crate::lm::{build_lm, lm_step, Granularity, LmRunner, TokenVocab, PREFIX as LM_PREFIX};
use crate::metrics::{align, normalize_text};
use crate::nn::{Optimizer, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean CTC loss over trained utterances; `None` in LM-only epochs.
    pub train_ctc: Option<f64>,
    /// Mean per-token LM loss; `None` when the LM was not updated.
    pub train_lm: Option<f64>,
    pub val_ctc: Option<f64>,
    pub val_lm_ce: f64,
    pub val_per: Option<f64>,
    pub skipped: usize,
    pub improved: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// LM pre-training epochs (separate schedule only).
    pub lm_epochs: Vec<EpochLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_per: f64,
    /// True when patience ran out before `epochs_max`.
    pub stopped_early: bool,
    /// Digest of the parameters snapshotted at the best epoch.
    pub best_digest: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub warm_start: Option<WarmStartReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub splits: Splits,
}

/// One usable utterance: audio, reference phones and LM tokens.
struct Utt {
    id: String,
    audio: AudioBuffer,
    phones: Vec<usize>,
    tokens: Vec<usize>,
}

/// Symbol tables shared by training and the checkpoint.
struct Tables {
    inventory: PhoneInventory,
    lexicon: Lexicon,
    vocab: TokenVocab,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn tables(cfg: &TrainConfig, m: &Manifest) -> Result<Tables> {
    let inventory = PhoneInventory::shona();
    if cfg.acoustic.n_phones != inventory.len() {
        return Err(AsrError::InvalidArgument(format!(
            "acoustic.n_phones is {} but the inventory has {} phones",
            cfg.acoustic.n_phones,
            inventory.len()
        )));
    }
    let lexicon = match &cfg.lexicon {
        Some(path) => Lexicon::load(path, &inventory)?,
        None => {
            let words: BTreeSet<String> = m.records.iter().flat_map(|r| normalize_text(&r.text)).collect();
            let words: Vec<String> = words.into_iter().collect();
            let (lex, failures) = Lexicon::build(&words, &inventory)?;
            for f in failures {
                warn!("lexicon: {f}");
            }
            lex
        }
    };
    let vocab = match cfg.lm.granularity {
        Granularity::Phone => TokenVocab::new(&inventory.symbols(), Granularity::Phone)?,
        Granularity::Word => TokenVocab::new(lexicon.words(), Granularity::Word)?,
    };
    Ok(Tables {
        inventory,
        lexicon,
        vocab,
    })
}

fn prepare(m: &Manifest, t: &Tables) -> (Vec<Utt>, Vec<(String, String)>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in &m.records {
        let attempt = || -> Result<Utt> {
            let words = normalize_text(&r.text);
            let prons = words.iter().map(|w| g2p(w, &t.inventory)).collect::<Result<Vec<_>>>()?;
            let symbols: Vec<Vec<String>> = prons
                .iter()
                .map(|p| p.iter().map(|&i| t.inventory.symbol(i).to_string()).collect())
                .collect();
            let word_refs: Vec<&str> = words.iter().map(String::as_str).collect();
            Ok(Utt {
                id: r.id.clone(),
                audio: load_wav(m.audio_path(r))?,
                phones: prons.concat(),
                tokens: t.vocab.encode(&word_refs, &symbols),
            })
        };
        match attempt() {
            Ok(u) => ok.push(u),
            Err(e) => {
                warn!("skipping utterance {}: {e}", r.id);
                failed.push((r.id.clone(), e.to_string()));
            }
        }
    }
    (ok, failed)
}

/// Speed, gain and SpecAugment with a per-(epoch, utterance) random stream.
fn augmented_features(cfg: &TrainConfig, u: &Utt, rng: &mut ChaCha8Rng) -> Result<FeatureMatrix> {
    let p = &cfg.augment;
    let factor = p.speed_factors[rng.random_range(0..p.speed_factors.len())];
    let [lo, hi] = p.gain_db_range;
    let gain = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let audio = speed_perturb(&u.audio, factor)?;
    let (audio, clipped) = volume_perturb(&audio, gain)?;
    if clipped > 0 {
        debug!("{}: {clipped} samples clipped at {gain:.1} dB", u.id);
    }
    let f = featurize(&audio, &cfg.features)?;
    Ok(spec_augment(&f, p, rng).0)
}

struct Validation {
    ctc: Option<f64>,
    lm_ce: f64,
    per: Option<f64>,
}

fn validate(
    cfg: &TrainConfig,
    ac: &Parameters,
    lm: &Parameters,
    val: &[(FeatureMatrix, &Utt)],
    with_acoustic: bool,
) -> Result<Validation> {
    let runner = LmRunner::new(lm)?;
    let lm_ce = val
        .iter()
        .map(|(_, u)| -runner.score(&u.tokens) / (u.tokens.len() + 1) as f64)
        .sum::<f64>()
        / val.len() as f64;
    if !with_acoustic {
        return Ok(Validation {
            ctc: None,
            lm_ce,
            per: None,
        });
    }
    let (mut ctc, mut n_ctc, mut errors, mut ref_len) = (0.0, 0usize, 0usize, 0usize);
    for (f, u) in val {
        let grid = acoustic_forward(ac, &cfg.acoustic, f)?;
        match grid.ctc_nll(&u.phones) {
            Ok(l) => {
                ctc += l;
                n_ctc += 1;
            }
            Err(e) => debug!("validation CTC skipped for {}: {e}", u.id),
        }
        errors += align(&u.phones, &grid.greedy()).errors();
        ref_len += u.phones.len();
    }
    Ok(Validation {
        ctc: (n_ctc > 0).then(|| ctc / n_ctc as f64),
        lm_ce,
        per: Some(errors as f64 / ref_len as f64),
    })
}

/// One pass of LM teacher forcing in a seeded order; returns the mean per-token loss.
fn lm_epoch(
    cfg: &TrainConfig,
    lm: &mut Parameters,
    opt: &mut Optimizer,
    train: &[Utt],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let batch = opt.config.batch_size;
    let mut sum = 0.0;
    for (i, &k) in order.iter().enumerate() {
        sum += lm_step(lm, &cfg.lm, &train[k].tokens)?;
        if (i + 1) % batch == 0 || i + 1 == order.len() {
            opt.step(lm)?;
        }
    }
    let mean = sum / train.len() as f64;
    if !mean.is_finite() {
        return Err(AsrError::Numeric("LM training loss is not finite".into()));
    }
    Ok(mean)
}

fn check_skips(cfg: &TrainConfig, skipped: usize, total: usize) -> Result<()> {
    if skipped == total || skipped as f64 > cfg.max_skip_fraction * total as f64 {
        return Err(AsrError::Data(format!(
            "{skipped} of {total} training utterances failed; aborting"
        )));
    }
    Ok(())
}

fn merged(ac: &Parameters, lm: &Parameters) -> Result<Parameters> {
    let mut p = ac.clone();
    p.extend(lm.clone())?;
    p.clear_grad();
    Ok(p)
}

/// Split the manifest, train both models and return the best-epoch checkpoint.
pub fn train(cfg: &TrainConfig, m: &Manifest) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = split_corpus(m, cfg.split, cfg.seed)?;
    info!(
        "split: {} train / {} val / {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let t = tables(cfg, m)?;
    let (train_utts, train_failed) = prepare(&splits.train, &t);
    let total_train = splits.train.len();
    check_skips(cfg, train_failed.len(), total_train)?;
    let (val_utts, _) = prepare(&splits.val, &t);
    let val_feats: Vec<(FeatureMatrix, &Utt)> = val_utts
        .iter()
        .filter_map(|u| match featurize(&u.audio, &cfg.features) {
            Ok(f) => Some((f, u)),
            Err(e) => {
                warn!("skipping validation utterance {}: {e}", u.id);
                None
            }
        })
        .collect();
    if val_feats.is_empty() {
        return Err(AsrError::Data("no usable validation utterances".into()));
    }

    let mut ac = build_acoustic_model(&cfg.acoustic, mix(&[cfg.seed, 1]))?;
    let mut lm = build_lm(&t.vocab, &cfg.lm, mix(&[cfg.seed, 2]))?;
    let mut freeze = Vec::new();
    let warm = match &cfg.warm_start {
        Some(w) => {
            let source = Checkpoint::load(&w.checkpoint)?;
            let mut both = merged(&ac, &lm)?;
            let report = warm_start(&mut both, &source.params, &w.freeze)?;
            ac = both.take_prefix(ACOUSTIC_PREFIX);
            lm = both.take_prefix(LM_PREFIX);
            freeze.clone_from(&w.freeze);
            Some(report)
        }
        None => None,
    };
    let mut ac_opt = Optimizer::new(cfg.acoustic_optimizer.clone()).with_frozen(&freeze);
    let mut lm_opt = Optimizer::new(cfg.lm_optimizer.clone()).with_frozen(&freeze);

    let static_feats: Option<Vec<Option<FeatureMatrix>>> = (!cfg.augment.enabled).then(|| {
        train_utts
            .iter()
            .map(|u| {
                featurize(&u.audio, &cfg.features)
                    .inspect_err(|e| warn!("{}: {e}", u.id))
                    .ok()
            })
            .collect()
    });

    let mut lm_log = Vec::new();
    if cfg.schedule == Schedule::Separate {
        let mut es = EarlyStopping::new(cfg.patience);
        let mut best = lm.clone();
        for epoch in 1..=cfg.epochs_max {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 3, epoch as u64]));
            let train_lm = lm_epoch(cfg, &mut lm, &mut lm_opt, &train_utts, &mut rng)?;
            let v = validate(cfg, &ac, &lm, &val_feats, false)?;
            let verdict = es.observe(epoch, v.lm_ce);
            if verdict == Verdict::Improved {
                best = lm.clone();
            }
            info!("lm epoch {epoch}: train {train_lm:.4} val ce {:.4}", v.lm_ce);
            lm_log.push(EpochLog {
                epoch,
                train_ctc: None,
                train_lm: Some(train_lm),
                val_ctc: None,
                val_lm_ce: v.lm_ce,
                val_per: None,
                skipped: 0,
                improved: verdict == Verdict::Improved,
            });
            if verdict == Verdict::Stop {
                break;
            }
        }
        lm = best;
    }

    let mut es = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut best: Option<(Parameters, String)> = None;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs_max {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 4, epoch as u64]));
        let mut order: Vec<usize> = (0..train_utts.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut trained, mut pending) = (0.0, 0usize, 0usize);
        let mut skipped = train_failed.len();
        for &k in &order {
            let u = &train_utts[k];
            let features = match &static_feats {
                Some(fs) => fs[k]
                    .clone()
                    .ok_or_else(|| AsrError::Data("feature extraction failed".into())),
                None => {
                    let mut urng =
                        ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, cfg.augment.seed, 5, epoch as u64, k as u64]));
                    augmented_features(cfg, u, &mut urng)
                }
            };
            match features.and_then(|f| acoustic_step(&mut ac, &cfg.acoustic, &f, &u.phones)) {
                Ok(l) if l.is_finite() => {
                    loss_sum += l;
                    trained += 1;
                    pending += 1;
                }
                Ok(l) => return Err(AsrError::Numeric(format!("CTC loss {l} on utterance {}", u.id))),
                Err(e @ (AsrError::Numeric(_) | AsrError::Autodiff(_))) => return Err(e),
                Err(e) => {
                    warn!("epoch {epoch}: skipping utterance {}: {e}", u.id);
                    skipped += 1;
                }
            }
            if pending == ac_opt.config.batch_size {
                ac_opt.step(&mut ac)?;
                pending = 0;
            }
        }
        if pending > 0 {
            ac_opt.step(&mut ac)?;
        }
        check_skips(cfg, skipped, total_train)?;
        let train_lm = match cfg.schedule {
            Schedule::Joint => {
                let mut lrng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 6, epoch as u64]));
                Some(lm_epoch(cfg, &mut lm, &mut lm_opt, &train_utts, &mut lrng)?)
            }
            Schedule::Separate => None,
        };
        let v = validate(cfg, &ac, &lm, &val_feats, true)?;
        let per = v.per.expect("acoustic validation ran");
        let verdict = es.observe(epoch, per);
        if verdict == Verdict::Improved {
            let snapshot = merged(&ac, &lm)?;
            let digest = snapshot.digest_f32();
            best = Some((snapshot, digest));
        }
        let entry = EpochLog {
            epoch,
            train_ctc: Some(loss_sum / trained.max(1) as f64),
            train_lm,
            val_ctc: v.ctc,
            val_lm_ce: v.lm_ce,
            val_per: Some(per),
            skipped,
            improved: verdict == Verdict::Improved,
        };
        info!(
            "epoch {epoch}: ctc {:.4} lm {} | val ctc {} lm ce {:.4} per {:.4}{}",
            entry.train_ctc.unwrap_or(f64::NAN),
            train_lm.map_or("-".into(), |l| format!("{l:.4}")),
            v.ctc.map_or("-".into(), |l| format!("{l:.4}")),
            v.lm_ce,
            per,
            if entry.improved { " *" } else { "" }
        );
        log.push(entry);
        if verdict == Verdict::Stop {
            stopped_early = epoch < cfg.epochs_max;
            break;
        }
    }
    let (params, best_digest) =
        best.ok_or_else(|| AsrError::Numeric("no epoch produced a finite validation PER".into()))?;
    if params.digest_f32() != best_digest {
        return Err(AsrError::Numeric(
            "restored parameters differ from the best-epoch snapshot".into(),
        ));
    }
    let best_epoch = es.best_epoch();
    let best_val_per = es.best().expect("best epoch recorded");
    info!("best epoch {best_epoch} (val PER {best_val_per:.4}), digest {best_digest}");
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        inventory: t.inventory,
        lexicon: t.lexicon,
        lm_vocab: t.vocab,
        params,
        best_metric: best_val_per,
        epoch: best_epoch,
    };
    let report = TrainReport {
        lm_epochs: lm_log,
        epochs: log,
        best_epoch,
        best_val_per,
        stopped_early,
        best_digest,
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        warm_start: warm,
    };
    Ok(TrainOutcome {
        checkpoint,
        report,
        splits,
    })
}
