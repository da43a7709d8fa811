//! MFCC extraction: per frame pre-emphasis, Hann window, magnitude FFT,
//! triangular mel filterbank, log, orthonormal DCT-II; then per-utterance
//! mean and variance normalization of every coefficient.

use std::f64::consts::PI;
use std::sync::Arc;

use mqnet_core::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioSample, SAMPLE_RATE};
use crate::error::{FrontendError, Result};
use crate::features::FeatureMatrix;

const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub num_coeffs: usize,
    pub num_mel: usize,
    /// Analysis window in samples (20 ms).
    pub window: usize,
    /// Hop in samples (10 ms).
    pub hop: usize,
    pub fft_size: usize,
    pub preemphasis: f64,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            num_coeffs: 64,
            num_mel: 64,
            window: 320,
            hop: 160,
            fft_size: 512,
            preemphasis: 0.97,
            low_hz: 0.0,
            high_hz: 8000.0,
        }
    }
}

impl MfccConfig {
    pub fn fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((n - window) / hop) + 1`, or an error below one window.
    pub fn frame_count(&self, samples: usize) -> Result<usize> {
        if samples < self.window {
            return Err(FrontendError::TooShort {
                samples,
                window: self.window,
            });
        }
        Ok((samples - self.window) / self.hop + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with edges equally spaced on the mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `num_mel + 2` edge frequencies; filter `m` spans `edges[m]..edges[m + 2]`.
    pub edges_hz: Vec<f64>,
    /// `num_mel x fft_bins`.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &MfccConfig) -> Self {
        let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high_hz));
        let edges_hz: Vec<f64> = (0..cfg.num_mel + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mel + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / cfg.fft_size as f64;
        let weights = (0..cfg.num_mel)
            .map(|m| {
                let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..cfg.fft_bins())
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self { edges_hz, weights }
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }
}

/// Reusable extractor holding the FFT plan, window, filterbank and DCT basis.
pub struct Mfcc {
    cfg: MfccConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
    dct: Vec<Vec<f64>>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.hop == 0 || cfg.window > cfg.fft_size {
            return Err(FrontendError::InvalidArgument(format!(
                "window {} / hop {} / fft {} are inconsistent",
                cfg.window, cfg.hop, cfg.fft_size
            )));
        }
        if cfg.num_coeffs == 0 || cfg.num_coeffs > cfg.num_mel || cfg.num_mel > cfg.fft_bins() {
            return Err(FrontendError::InvalidArgument(format!(
                "need 0 < num_coeffs ({}) <= num_mel ({}) <= fft bins ({})",
                cfg.num_coeffs,
                cfg.num_mel,
                cfg.fft_bins()
            )));
        }
        if !(0.0 <= cfg.low_hz && cfg.low_hz < cfg.high_hz && cfg.high_hz <= SAMPLE_RATE as f64 / 2.0) {
            return Err(FrontendError::InvalidArgument("mel range must lie in [0, 8000] Hz".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let n = cfg.window as f64;
        // periodic Hann
        let window = (0..cfg.window).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect();
        let bank = MelFilterbank::new(&cfg);
        let nm = cfg.num_mel as f64;
        let dct = (0..cfg.num_coeffs)
            .map(|k| {
                let s = if k == 0 { (1.0 / nm).sqrt() } else { (2.0 / nm).sqrt() };
                (0..cfg.num_mel)
                    .map(|i| s * (PI * k as f64 * (i as f64 + 0.5) / nm).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            bank,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    fn check(&self, a: &AudioSample) -> Result<usize> {
        if a.sample_rate != SAMPLE_RATE {
            return Err(FrontendError::Header {
                field: "sample_rate",
                msg: format!("expected {SAMPLE_RATE}, got {}", a.sample_rate),
            });
        }
        self.cfg.frame_count(a.samples.len())
    }

    /// Mel filterbank energies (before the log), `T x num_mel`.
    pub fn mel_energies(&self, a: &AudioSample) -> Result<Tensor> {
        let t = self.check(a)?;
        let cfg = &self.cfg;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut out = Vec::with_capacity(t * cfg.num_mel);
        for f in 0..t {
            let frame = &a.samples[f * cfg.hop..f * cfg.hop + cfg.window];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, slot) in buf.iter_mut().take(cfg.window).enumerate() {
                let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                *slot = Complex::new((frame[i] - cfg.preemphasis * prev) * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            let mag: Vec<f64> = buf[..cfg.fft_bins()].iter().map(|c| c.norm()).collect();
            for w in &self.bank.weights {
                out.push(w.iter().zip(&mag).map(|(a, b)| a * b).sum());
            }
        }
        Ok(Tensor::matrix(t, cfg.num_mel, out)?)
    }

    /// Cepstra without the per-utterance normalization.
    pub fn raw(&self, a: &AudioSample) -> Result<Tensor> {
        let energies = self.mel_energies(a)?;
        let t = energies.rows();
        let mut out = Vec::with_capacity(t * self.cfg.num_coeffs);
        for f in 0..t {
            let logs: Vec<f64> = energies.row(f).iter().map(|e| (e + LOG_FLOOR).ln()).collect();
            for basis in &self.dct {
                out.push(basis.iter().zip(&logs).map(|(a, b)| a * b).sum());
            }
        }
        Ok(Tensor::matrix(t, self.cfg.num_coeffs, out)?)
    }

    pub fn compute(&self, a: &AudioSample) -> Result<FeatureMatrix> {
        let mut frames = self.raw(a)?;
        normalize(&mut frames);
        Ok(FeatureMatrix::new(frames, a.utt_id.clone()))
    }
}

/// One-shot MFCC with default framing and the given coefficient and filter counts.
pub fn mfcc(a: &AudioSample, num_coeffs: usize, num_mel: usize) -> Result<FeatureMatrix> {
    Mfcc::new(MfccConfig {
        num_coeffs,
        num_mel,
        ..MfccConfig::default()
    })?
    .compute(a)
}

/// Zero-mean, unit-variance columns. Constant columns become exactly zero;
/// columns with vanishing variance are only centered.
pub fn normalize(frames: &mut Tensor) {
    let (t, c) = (frames.rows(), frames.cols());
    for j in 0..c {
        let col: Vec<f64> = (0..t).map(|i| frames.at(i, j)).collect();
        let constant = col.iter().all(|&v| v == col[0]);
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        let data = frames.data_mut();
        for (i, v) in col.iter().enumerate() {
            data[i * c + j] = if constant { 0.0 } else { (v - mean) * scale };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(hz: f64, n: usize) -> AudioSample {
        AudioSample::new(
            (0..n).map(|i| 0.5 * (2.0 * PI * hz * i as f64 / 16_000.0).sin()).collect(),
            "sine",
        )
    }

    #[test]
    fn one_second_gives_99_frames() {
        let f = mfcc(&sine(440.0, 16_000), 64, 64).unwrap();
        assert_eq!((f.num_frames(), f.dim()), (99, 64));
        assert!(f.frames.is_finite());
    }

    #[test]
    fn shorter_than_a_window_is_rejected() {
        assert!(matches!(
            mfcc(&sine(440.0, 319), 64, 64),
            Err(FrontendError::TooShort { samples: 319, window: 320 })
        ));
        assert_eq!(mfcc(&sine(440.0, 320), 64, 64).unwrap().num_frames(), 1);
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let f = mfcc(&AudioSample::new(vec![0.25; 4000], "dc"), 64, 64).unwrap();
        assert!(f.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thousand_hertz_peaks_in_a_bracketing_filter() {
        let ex = Mfcc::new(MfccConfig::default()).unwrap();
        let e = ex.mel_energies(&sine(1000.0, 3200)).unwrap();
        let bank = ex.filterbank();
        for t in 0..e.rows() {
            let row = e.row(t);
            let m = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            // centers from the mel formula, independent of the weight matrix
            let spacing = (hz_to_mel(8000.0) - hz_to_mel(0.0)) / 65.0;
            let lower = mel_to_hz(spacing * m as f64);
            let upper = mel_to_hz(spacing * (m + 2) as f64);
            assert!(lower < 1000.0 && 1000.0 < upper, "filter {m} spans {lower}..{upper}");
            assert!((bank.center_hz(m) - mel_to_hz(spacing * (m + 1) as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 999.985_537_139_6).abs() < 1e-6);
    }

    #[test]
    fn dct_is_orthonormal() {
        let ex = Mfcc::new(MfccConfig::default()).unwrap();
        for a in 0..64 {
            for b in 0..64 {
                let dot: f64 = ex.dct[a].iter().zip(&ex.dct[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coefficient_count_can_be_smaller_than_filter_count() {
        let f = mfcc(&sine(300.0, 2000), 13, 40).unwrap();
        assert_eq!(f.dim(), 13);
        assert!(mfcc(&sine(300.0, 2000), 41, 40).is_err());
    }

    #[test]
    fn normalization_gives_zero_mean_unit_variance() {
        let f = mfcc(&sine(733.0, 8000), 64, 64).unwrap();
        let t = f.num_frames() as f64;
        for j in 1..4 {
            let col: Vec<f64> = (0..f.num_frames()).map(|i| f.frames.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / t;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
            assert!(mean.abs() < 1e-12);
            assert!(var == 0.0 || (var - 1.0).abs() < 1e-9);
        }
    }
}
