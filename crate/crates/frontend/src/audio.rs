use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{FrontendError, Result};

pub const SAMPLE_RATE: u32 = 16_000;
const SCALE: f64 = 32_768.0;

/// Mono audio scaled to `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSample {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
    pub utt_id: String,
}

impl AudioSample {
    pub fn new(samples: Vec<f64>, utt_id: impl Into<String>) -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            samples,
            utt_id: utt_id.into(),
        }
    }

    pub fn from_pcm(pcm: &[i16], utt_id: impl Into<String>) -> Self {
        Self::new(pcm.iter().map(|&s| s as f64 / SCALE).collect(), utt_id)
    }

    /// Inverse of the load scaling; values outside the 16-bit range are clipped.
    pub fn to_pcm(&self) -> Vec<i16> {
        self.samples
            .iter()
            .map(|&x| (x * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
            .collect()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn check_spec(s: &WavSpec) -> Result<()> {
    let bad = |field, msg: String| Err(FrontendError::Header { field, msg });
    if s.sample_format != SampleFormat::Int {
        return bad("sample_format", "expected integer PCM".into());
    }
    if s.bits_per_sample != 16 {
        return bad("bits_per_sample", format!("expected 16, got {}", s.bits_per_sample));
    }
    if s.channels != 1 {
        return bad("channels", format!("expected mono, got {}", s.channels));
    }
    if s.sample_rate != SAMPLE_RATE {
        return bad("sample_rate", format!("expected {SAMPLE_RATE}, got {}", s.sample_rate));
    }
    Ok(())
}

pub fn read_pcm<R: Read>(reader: R) -> Result<Vec<i16>> {
    let wav = WavReader::new(reader).map_err(|e| FrontendError::Wav(e.to_string()))?;
    check_spec(&wav.spec())?;
    wav.into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| FrontendError::Wav(e.to_string()))
}

pub fn write_pcm<W: Write + Seek>(writer: W, pcm: &[i16]) -> Result<()> {
    let mut w = WavWriter::new(writer, spec()).map_err(|e| FrontendError::Wav(e.to_string()))?;
    for &s in pcm {
        w.write_sample(s).map_err(|e| FrontendError::Wav(e.to_string()))?;
    }
    w.finalize().map_err(|e| FrontendError::Wav(e.to_string()))
}

/// Reads a 16 kHz 16-bit mono PCM file; the utterance id is the file stem.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSample> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FrontendError::io(path, e))?;
    let pcm = read_pcm(BufReader::new(file))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(AudioSample::from_pcm(&pcm, id))
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioSample) -> Result<()> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(FrontendError::Header {
            field: "sample_rate",
            msg: format!("expected {SAMPLE_RATE}, got {}", audio.sample_rate),
        });
    }
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FrontendError::io(path, e))?;
    write_pcm(BufWriter::new(file), &audio.to_pcm())
}
