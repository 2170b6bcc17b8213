//! Audio front end: log-mel features, feature normalization, mu-law
//! companding, and simple signal synthesis.
//!
//! The log-mel path is the fixed recipe the speech models are built around:
//! periodic Hann window, real-signal FFT magnitude, HTK-style triangular mel
//! filterbank, natural log with a floor. A frame exists only when it is fully
//! covered by samples, so `frames = 1 + floor((n - win) / hop)` and short
//! clips produce zero frames.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{round_half_away, Tensor};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// PCM audio in `[-1, 1]` floats at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Pure sine tone.
pub fn tone(freq_hz: f64, seconds: f64, amplitude: f64, sample_rate: u32) -> AudioBuffer {
    let n = (seconds * f64::from(sample_rate)).round().max(0.0) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(sample_rate);
            (amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin()) as f32
        })
        .collect();
    AudioBuffer { samples, sample_rate }
}

pub fn silence(seconds: f64, sample_rate: u32) -> AudioBuffer {
    let n = (seconds * f64::from(sample_rate)).round().max(0.0) as usize;
    AudioBuffer { samples: vec![0.0; n], sample_rate }
}

/// Log-mel extraction parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FeatureConfig {
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Energy floor applied before the log.
    pub floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            win_ms: 50.0,
            hop_ms: 25.0,
            fft_size: 1024,
            mel_bands: 64,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    fn check(&self, sample_rate: u32) -> Result<(usize, usize), DspError> {
        let win = self.win_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        if sample_rate == 0 {
            return Err(DspError::ConfigError("sample rate must be positive".into()));
        }
        if hop == 0 || win == 0 {
            return Err(DspError::ConfigError("window and hop must be positive".into()));
        }
        if hop > win {
            return Err(DspError::ConfigError(format!(
                "hop ({hop}) must not exceed window ({win})"
            )));
        }
        if self.fft_size < win {
            return Err(DspError::ConfigError(format!(
                "fft size {} smaller than window {win}",
                self.fft_size
            )));
        }
        if self.mel_bands == 0 {
            return Err(DspError::ConfigError("mel_bands must be positive".into()));
        }
        if !(self.fmin_hz >= 0.0) || !(self.fmax_hz > self.fmin_hz) {
            return Err(DspError::ConfigError("need 0 <= fmin < fmax".into()));
        }
        if self.fmax_hz > f64::from(sample_rate) / 2.0 {
            return Err(DspError::ConfigError(format!(
                "fmax {} exceeds Nyquist {}",
                self.fmax_hz,
                f64::from(sample_rate) / 2.0
            )));
        }
        if !(self.floor > 0.0) {
            return Err(DspError::ConfigError("floor must be positive".into()));
        }
        Ok((win, hop))
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT magnitude bins, `[bands][fft/2 + 1]`.
fn mel_filterbank(cfg: &FeatureConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.mel_bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.mel_bands + 1) as f64))
        .collect();
    let mut fb = vec![vec![0.0f64; bins]; cfg.mel_bands];
    for m in 0..cfg.mel_bands {
        let (f_lo, f_c, f_hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, w) in fb[m].iter_mut().enumerate() {
            let f = k as f64 * f64::from(sample_rate) / cfg.fft_size as f64;
            if f > f_lo && f < f_c {
                *w = (f - f_lo) / (f_c - f_lo);
            } else if (f - f_c).abs() == 0.0 {
                *w = 1.0;
            } else if f > f_c && f < f_hi {
                *w = (f_hi - f) / (f_hi - f_c);
            }
        }
    }
    fb
}

/// Log-mel features as a `[mel_bands, frames]` float tensor.
pub fn log_mel(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<Tensor, DspError> {
    let (win, hop) = cfg.check(audio.sample_rate)?;
    let n = audio.samples.len();
    let frames = if n < win { 0 } else { 1 + (n - win) / hop };
    let bands = cfg.mel_bands;
    if frames == 0 {
        return Ok(Tensor::from_f32(vec![bands, 0], vec![]).expect("empty features"));
    }

    // Periodic Hann.
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg, audio.sample_rate);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);

    let bins = cfg.fft_size / 2 + 1;
    let mut out = vec![0.0f32; bands * frames];
    let mut buf = vec![Complex::new(0.0f64, 0.0f64); cfg.fft_size];
    let mut mags = vec![0.0f64; bins];
    for t in 0..frames {
        let start = t * hop;
        for i in 0..cfg.fft_size {
            let v = if i < win {
                f64::from(audio.samples[start + i]) * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mags.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for (b, filt) in fb.iter().enumerate() {
            let mut e = 0.0f64;
            for (k, &w) in filt.iter().enumerate() {
                if w != 0.0 {
                    e += w * mags[k];
                }
            }
            out[b * frames + t] = e.max(cfg.floor).ln() as f32;
        }
    }
    Ok(Tensor::from_f32(vec![bands, frames], out).expect("feature shape"))
}

/// Per-channel mean and standard deviation of a `[C, T]` feature tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population statistics per channel. Standard deviations are floored at
/// `1e-8` so constant channels normalize to zero instead of dividing by zero.
pub fn compute_norm_stats(features: &Tensor) -> Result<NormStats, DspError> {
    let v = features
        .as_f32()
        .map_err(|_| DspError::ShapeMismatch("features must be float".into()))?;
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(DspError::ShapeMismatch(format!("features must be [C, T], got {shape:?}")));
    }
    let (c, t) = (shape[0], shape[1]);
    if t == 0 {
        return Err(DspError::ShapeMismatch("cannot compute stats of zero frames".into()));
    }
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    for ch in 0..c {
        let row = &v[ch * t..(ch + 1) * t];
        let m: f64 = row.iter().map(|&x| f64::from(x)).sum::<f64>() / t as f64;
        let var: f64 =
            row.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / t as f64;
        mean[ch] = m;
        std[ch] = var.sqrt().max(1e-8);
    }
    Ok(NormStats { mean, std })
}

/// Normalizes `[C, T]` features to zero mean and unit variance per channel.
pub fn normalize(features: &Tensor, stats: &NormStats) -> Result<Tensor, DspError> {
    let v = features
        .as_f32()
        .map_err(|_| DspError::ShapeMismatch("features must be float".into()))?;
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != stats.mean.len() {
        return Err(DspError::ShapeMismatch(format!(
            "features {shape:?} do not match stats over {} channels",
            stats.mean.len()
        )));
    }
    let (c, t) = (shape[0], shape[1]);
    let mut out = vec![0.0f32; c * t];
    for ch in 0..c {
        for i in 0..t {
            out[ch * t + i] =
                ((f64::from(v[ch * t + i]) - stats.mean[ch]) / stats.std[ch]) as f32;
        }
    }
    Ok(Tensor::from_f32(vec![c, t], out).expect("normalized shape"))
}

const MU: f64 = 255.0;

/// Mu-law companding of one sample (clamped to `[-1, 1]`) to a byte code.
/// The compressed value `sign(x) * ln(1 + 255|x|) / ln(256)` is mapped
/// linearly from `[-1, 1]` onto `[0, 255]` with round-half-away-from-zero.
pub fn mulaw_encode(x: f32) -> u8 {
    let x = f64::from(x).clamp(-1.0, 1.0);
    let f = x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln();
    let code = round_half_away((f + 1.0) * 127.5);
    code.clamp(0.0, 255.0) as u8
}

/// Inverse of [`mulaw_encode`], mapping a code back to the center of its
/// compressed-domain cell.
pub fn mulaw_decode(code: u8) -> f32 {
    let y = f64::from(code) / 127.5 - 1.0;
    let x = y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU;
    x as f32
}

pub fn mulaw_encode_buffer(samples: &[f32]) -> Vec<u8> {
    samples.iter().map(|&x| mulaw_encode(x)).collect()
}

pub fn mulaw_decode_buffer(codes: &[u8]) -> Vec<f32> {
    codes.iter().map(|&c| mulaw_decode(c)).collect()
}
