//! Pairing transcripts with audio or cached features, and the synthetic toy corpus.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use mqnet_core::Tensor;
use mqnet_frontend::features::load_features;
use mqnet_frontend::synth::{toy_corpus, SynthConfig};
use mqnet_frontend::transcript::{read_transcripts, write_transcripts, Transcript};
use mqnet_frontend::{load_wav, write_wav, Mfcc, MfccConfig};

use crate::error::{Result, TrainError};

pub const TRANSCRIPTS_FILE: &str = "transcripts.txt";
pub const WAV_DIR: &str = "wav";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    /// 1-based line in the transcript file.
    pub line: usize,
    pub features: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    /// Transcript ids with neither `<id>.mqft` nor `<id>.wav` in the data directory.
    pub missing_audio: Vec<String>,
    /// Audio or feature files without a transcript line.
    pub missing_transcripts: Vec<String>,
}

impl Corpus {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.text.as_str())
    }
}

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| TrainError::io(dir, e))? {
        let path = entry.map_err(|e| TrainError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("wav") | Some("mqft")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Features for one utterance: the `.mqft` cache if present, otherwise MFCC of the `.wav`.
pub fn utterance_features(dir: &Path, id: &str, mfcc: &Mfcc) -> Result<Option<Tensor>> {
    let cached = dir.join(format!("{id}.mqft"));
    if cached.exists() {
        return Ok(Some(load_features(&cached)?.frames));
    }
    let wav = dir.join(format!("{id}.wav"));
    if wav.exists() {
        return Ok(Some(mfcc.compute(&load_wav(&wav)?)?.frames));
    }
    Ok(None)
}

pub fn load_corpus(transcripts: impl AsRef<Path>, data_dir: impl AsRef<Path>, mfcc: &MfccConfig) -> Result<Corpus> {
    let data_dir = data_dir.as_ref();
    let items = read_transcripts(transcripts)?;
    let extractor = Mfcc::new(mfcc.clone())?;
    let mut available = stems(data_dir)?;
    let mut corpus = Corpus::default();
    for (line, Transcript { utt_id, text }) in items.into_iter().enumerate() {
        available.remove(&utt_id);
        match utterance_features(data_dir, &utt_id, &extractor)? {
            Some(features) => corpus.utterances.push(Utterance {
                id: utt_id,
                text,
                line: line + 1,
                features,
            }),
            None => corpus.missing_audio.push(utt_id),
        }
    }
    corpus.missing_transcripts = available.into_iter().collect();
    Ok(corpus)
}

/// Writes `count` synthetic utterances as `dir/wav/<id>.wav` plus `dir/transcripts.txt`.
pub fn write_toy_corpus(dir: impl AsRef<Path>, count: usize, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let wav_dir = dir.join(WAV_DIR);
    fs::create_dir_all(&wav_dir).map_err(|e| TrainError::io(&wav_dir, e))?;
    let mut lines = Vec::with_capacity(count);
    for (text, audio) in toy_corpus(count, seed, &SynthConfig::default())? {
        write_wav(wav_dir.join(format!("{}.wav", audio.utt_id)), &audio)?;
        lines.push(Transcript {
            utt_id: audio.utt_id,
            text,
        });
    }
    let path = dir.join(TRANSCRIPTS_FILE);
    write_transcripts(&path, &lines)?;
    Ok(path)
}
