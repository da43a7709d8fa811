use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mqnet_core::count::{analytic, enumerated};
use mqnet_core::{Model, ModelConfig};
use mqnet_decoder::{BeamConfig, NGramLM, Vocabulary};
use mqnet_frontend::features::save_features;
use mqnet_frontend::transcript::read_transcripts;
use mqnet_frontend::{load_wav, Mfcc, MfccConfig};
use mqnet_train::corpus::{load_corpus, utterance_features, write_toy_corpus};
use mqnet_train::dump::dump_weights;
use mqnet_train::evaluate::{decode, evaluate};
use mqnet_train::trainer::AugmentConfig;
use mqnet_train::{Checkpoint, Novograd, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "mqnet", version, about = "Multi-resolution QuartzNet speech recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute MFCC features for every .wav in a directory.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        features: usize,
    },
    /// Collect the character set of a transcript file.
    BuildVocab {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a character n-gram LM and write it as ARPA.
    TrainLm {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = mqnet_decoder::lm::DEFAULT_ORDER)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    /// Transcribe one utterance (.wav or .mqft).
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Score a test set and write a JSON CER report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-row parameter breakdown of a config.
    CountParams {
        #[arg(long, default_value = "15x5")]
        config: String,
        #[arg(long)]
        reduction: Option<usize>,
    },
    /// Write attention and fusion gates for a probe utterance as CSV.
    DumpWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic tone utterances with transcripts.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BeamArgs {
    /// ARPA language model; without it beam search uses acoustics and the length bonus only.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    beam: usize,
    #[arg(long, default_value_t = 1.8)]
    alpha: f64,
    #[arg(long, default_value_t = 3.5)]
    beta: f64,
    /// Report greedy decoding only.
    #[arg(long)]
    greedy: bool,
}

impl BeamArgs {
    fn config(&self) -> Option<BeamConfig> {
        (!self.greedy).then_some(BeamConfig {
            alpha: self.alpha,
            beta: self.beta,
            beam: self.beam,
        })
    }

    fn lm(&self, vocab: &Vocabulary) -> Result<Option<NGramLM>> {
        let Some(path) = &self.lm else { return Ok(None) };
        let lm = NGramLM::load(path)?;
        if !lm.matches(vocab) {
            bail!("{}: LM alphabet differs from the checkpoint vocabulary", path.display());
        }
        Ok(Some(lm))
    }
}

/// Train a model; writes the final checkpoint to `--out`.
#[derive(Args)]
struct TrainArgs {
    /// Preset name (`5x3`, `15x5`, `toy`) or path to a TOML config.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Vocabulary file; built from the transcripts when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON-lines metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    epochs: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_min: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8000)]
    warmup: u64,
    /// Attention bottleneck ratio; overrides the config's value.
    #[arg(long)]
    reduction: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Stop after this many steps (the schedule still spans all epochs).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Save a checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

fn load_config(spec: &str, reduction: Option<usize>) -> Result<ModelConfig> {
    let mut cfg = match ModelConfig::preset(spec) {
        Ok(cfg) => cfg,
        Err(_) => {
            let text = fs::read_to_string(spec).with_context(|| format!("{spec} is neither a preset nor a readable file"))?;
            ModelConfig::from_toml(&text)?
        }
    };
    if let Some(r) = reduction {
        cfg.reduction = r;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn mfcc_for(features: usize) -> MfccConfig {
    MfccConfig {
        num_coeffs: features,
        num_mel: features.max(MfccConfig::default().num_mel),
        ..MfccConfig::default()
    }
}

fn probe_features(path: &Path, features: usize) -> Result<mqnet_core::Tensor> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("{}: no file name", path.display()))?;
    let mfcc = Mfcc::new(mfcc_for(features))?;
    let f = utterance_features(dir, stem, &mfcc)?.with_context(|| format!("{}: no .wav or .mqft", path.display()))?;
    if f.cols() != features {
        bail!("{}: {} features per frame, model expects {features}", path.display(), f.cols());
    }
    Ok(f)
}

fn train(a: TrainArgs) -> Result<()> {
    let texts: Vec<String> = read_transcripts(&a.transcripts)?.into_iter().map(|t| t.text).collect();
    let (model, optimizer, step, vocab, config) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let vocab = ck.vocabulary()?;
            info!("resuming from {} at step {}", path.display(), ck.step);
            (ck.model, ck.optimizer, ck.step, vocab, ck.train)
        }
        None => {
            let vocab = match &a.vocab {
                Some(p) => Vocabulary::load(p)?,
                None => Vocabulary::from_texts(texts.iter().map(String::as_str))?,
            };
            let mut cfg = load_config(&a.config, a.reduction)?;
            cfg.vocab_size = vocab.len();
            cfg.validate()?;
            let config = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: a.seed,
                lr: a.lr,
                lr_min: a.lr_min,
                weight_decay: a.weight_decay,
                warmup: a.warmup,
                augment: (!a.no_augment).then(AugmentConfig::default),
            };
            let model = Model::build(&cfg, a.seed)?;
            (model, Novograd::new(a.weight_decay), 0, vocab, config)
        }
    };
    let corpus = load_corpus(&a.transcripts, &a.data_dir, &mfcc_for(model.config.features))?;
    for id in &corpus.missing_audio {
        warn!("{id}: transcript has no audio");
    }
    let mut trainer = Trainer::resume(model, optimizer, step, &corpus.utterances, &vocab, config)?;
    if !trainer.skipped.is_empty() {
        warn!("{} utterances skipped as CTC-infeasible", trainer.skipped.len());
    }
    info!(
        "{} utterances, {} steps ({} per epoch), {} parameters",
        trainer.items().len(),
        trainer.total_steps(),
        trainer.config.steps_per_epoch(trainer.items().len()),
        trainer.model.store.trainable_count()
    );
    let mut log = match &a.metrics {
        Some(p) => {
            let f = fs::OpenOptions::new()
                .create(true)
                .append(a.resume.is_some())
                .write(true)
                .truncate(a.resume.is_none())
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let until = a.max_steps.unwrap_or(u64::MAX);
    let every = a.checkpoint_every.filter(|&n| n > 0);
    let out = a.out.clone();
    trainer.run(until, log.as_mut(), |t, r| {
        if r.step % 100 == 0 {
            info!("step {} lr {:.6} loss {:.4}", r.step, r.lr, r.loss);
        }
        if every.is_some_and(|n| t.step % n == 0) {
            Checkpoint::from_trainer(t, &vocab).save(&out)?;
        }
        Ok(())
    })?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Checkpoint::from_trainer(&trainer, &vocab).save(&a.out)?;
    info!("saved {} at step {}", a.out.display(), trainer.step);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { input, out, features } => {
            fs::create_dir_all(&out)?;
            let mfcc = Mfcc::new(mfcc_for(features))?;
            let mut n = 0;
            let mut entries: Vec<PathBuf> = fs::read_dir(&input)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            for path in entries.iter().filter(|p| p.extension().is_some_and(|e| e == "wav")) {
                let audio = load_wav(path)?;
                let f = mfcc.compute(&audio)?;
                save_features(out.join(format!("{}.mqft", audio.utt_id)), &f.frames)?;
                n += 1;
            }
            println!("featurized {n} files into {}", out.display());
        }
        Command::BuildVocab { transcripts, out } => {
            let items = read_transcripts(&transcripts)?;
            let vocab = Vocabulary::from_texts(items.iter().map(|t| t.text.as_str()))?;
            vocab.save(&out)?;
            println!("{} characters", vocab.len());
        }
        Command::TrainLm {
            transcripts,
            vocab,
            order,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let items = read_transcripts(&transcripts)?;
            let lm = NGramLM::train(
                items.iter().map(|t| t.text.as_str()),
                &vocab,
                order,
                mqnet_decoder::lm::DEFAULT_DISCOUNT,
            )?;
            lm.save(&out)?;
        }
        Command::Train(a) => train(a)?,
        Command::Decode {
            checkpoint,
            input,
            beam,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let vocab = ck.vocabulary()?;
            let lm = beam.lm(&vocab)?;
            let f = probe_features(&input, ck.config.features)?;
            let (greedy, hyp) = decode(&ck.model, &f, &vocab, lm.as_ref(), beam.config().as_ref())?;
            println!("{}", hyp.unwrap_or(greedy));
        }
        Command::Eval {
            checkpoint,
            transcripts,
            data_dir,
            beam,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let vocab = ck.vocabulary()?;
            let lm = beam.lm(&vocab)?;
            let corpus = load_corpus(&transcripts, &data_dir, &mfcc_for(ck.config.features))?;
            let report = evaluate(&ck.model, &corpus, &vocab, lm.as_ref(), beam.config().as_ref())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            eprintln!("greedy CER {:.4}", report.greedy_cer);
            if let Some(b) = report.beam_cer {
                eprintln!("beam CER {b:.4}");
            }
        }
        Command::CountParams { config, reduction } => {
            let cfg = load_config(&config, reduction)?;
            let counts = analytic(&cfg);
            let built = Model::build(&cfg, 0)?;
            if counts != enumerated(&built.store) {
                bail!("analytic and enumerated counts disagree");
            }
            println!("{counts}");
        }
        Command::DumpWeights { checkpoint, input, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let f = probe_features(&input, ck.config.features)?;
            for p in dump_weights(&ck.model, &f, &out)? {
                println!("{}", p.display());
            }
        }
        Command::MakeToyCorpus { out, count, seed } => {
            let t = write_toy_corpus(&out, count, seed)?;
            println!("{}", t.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
