use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use shona_asr::corpusgen::{generate_corpus, GenConfig};
use shona_asr::dsp::{featurize, load_wav, MelConfig};
use shona_asr::gradsuite;
use shona_asr::pipeline::{
    evaluate, format_transcripts, load_manifest, save_features, split_corpus, train, Checkpoint, Recognizer,
    TrainConfig,
};
use shona_asr::AsrError;

#[derive(Parser)]
#[command(name = "asr", version, about = "Shona speech recognition toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides the seed of the config or checkpoint in use.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Debug-level logging.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Extract stacked 39-dim MFCC features from a WAV file.
    Features {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Corpusgen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the acoustic model and language model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Transcribe one WAV file.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        word_bonus: Option<f64>,
    },
    /// Score a manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
        /// Hypotheses as `<utt-id>\t<text>` lines.
        #[arg(long)]
        hyp: Option<PathBuf>,
        /// Normalized references in the same format.
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        word_bonus: Option<f64>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: usize,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features { wav, out } => {
            let f = featurize(&load_wav(&wav)?, &MelConfig::default())?;
            save_features(&out, &f)?;
            println!("{} frames x {} features -> {}", f.rows, f.cols, out.display());
        }
        Command::Corpusgen { config, out_dir } => {
            let text = std::fs::read_to_string(&config).map_err(|e| AsrError::Io {
                path: config.clone(),
                source: e,
            })?;
            let mut cfg: GenConfig = serde_json::from_str(&text)
                .map_err(|e| AsrError::InvalidArgument(format!("{}: {e}", config.display())))?;
            if let Some(s) = cli.global.seed {
                cfg.seed = s;
            }
            let c = generate_corpus(&cfg, &out_dir)?;
            println!(
                "{} utterances, {} words -> {}",
                c.manifest.len(),
                c.lexicon.len(),
                out_dir.display()
            );
        }
        Command::Train {
            config,
            manifest,
            out,
            report,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = cli.global.seed {
                cfg.seed = s;
            }
            let m = load_manifest(&manifest)?;
            let outcome = train(&cfg, &m)?;
            outcome.checkpoint.save(&out)?;
            let reloaded = Checkpoint::load(&out)?;
            if reloaded.params.digest_f32() != outcome.report.best_digest {
                return Err(AsrError::Numeric("saved checkpoint does not match the best-epoch snapshot".into()).into());
            }
            if let Some(path) = report {
                write(&path, serde_json::to_string_pretty(&outcome.report)? + "\n")?;
            }
            println!(
                "best epoch {} of {} (val PER {:.4}) -> {}",
                outcome.report.best_epoch,
                outcome.report.epochs.len(),
                outcome.report.best_val_per,
                out.display()
            );
        }
        Command::Decode {
            ckpt,
            wav,
            lm_weight,
            beam,
            word_bonus,
        } => {
            let rec = Recognizer::new(Checkpoint::load(&ckpt)?)?;
            let mut params = rec.ckpt.config.decode;
            params.lm_weight = lm_weight.unwrap_or(params.lm_weight);
            params.beam = beam.unwrap_or(params.beam);
            params.word_bonus = word_bonus.unwrap_or(params.word_bonus);
            let t = rec.transcribe(&load_wav(&wav)?, &params)?;
            if t.is_empty() {
                warn!("no hypothesis survived the beam");
            }
            info!("score {:.3} (acoustic {:.3}, lm {:.3})", t.score, t.acoustic, t.lm);
            println!("{}", t.text());
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            report,
            hyp,
            refs,
            lm_weight,
            beam,
            word_bonus,
        } => {
            let rec = Recognizer::new(Checkpoint::load(&ckpt)?)?;
            let cfg = &rec.ckpt.config;
            let m = load_manifest(&manifest)?;
            let subset = match split {
                SplitName::All => m,
                s => {
                    let parts = split_corpus(&m, cfg.split, cli.global.seed.unwrap_or(cfg.seed))?;
                    match s {
                        SplitName::Train => parts.train,
                        SplitName::Val => parts.val,
                        _ => parts.test,
                    }
                }
            };
            let mut params = cfg.decode;
            params.lm_weight = lm_weight.unwrap_or(params.lm_weight);
            params.beam = beam.unwrap_or(params.beam);
            params.word_bonus = word_bonus.unwrap_or(params.word_bonus);
            let out = evaluate(&rec, &subset, &params)?;
            write(&report, out.report.to_json()? + "\n")?;
            if let Some(p) = hyp {
                write(&p, format_transcripts(&out.hypotheses))?;
            }
            if let Some(p) = refs {
                write(&p, format_transcripts(&out.references))?;
            }
            println!("beam search (lm weight {}, beam {})", params.lm_weight, params.beam);
            println!("{}", out.report.table());
            println!("\ngreedy CTC, no LM");
            println!("{}", out.greedy.table());
            if !out.skipped.is_empty() {
                warn!("{} utterances skipped", out.skipped.len());
            }
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(AsrError::InvalidArgument("--seeds must be positive".into()).into());
            }
            let results = gradsuite::run_suite(seeds, cli.global.seed.unwrap_or(0))?;
            for r in &results {
                println!(
                    "{:<24} {} max rel err {:.2e} over {} scalars, {} seeds ({:.2}s)",
                    r.op,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.scalars_checked,
                    r.seeds,
                    r.seconds
                );
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                bail!(AsrError::Numeric(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<AsrError>())
        .map_or(2, |a| a.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
