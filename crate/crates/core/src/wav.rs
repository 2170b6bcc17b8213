//! WAV file I/O for 16-bit PCM, with multichannel downmix on read.

use std::path::Path;

use thiserror::Error;

use crate::dsp::AudioBuffer;
use crate::tensor::round_half_away;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("wav error: {0}")]
    Codec(#[from] hound::Error),
    #[error("unsupported wav format: {0}")]
    Format(String),
}

/// Reads a 16-bit PCM WAV file. Multichannel audio is downmixed to mono by
/// averaging channels per frame.
pub fn read_wav(path: &Path) -> Result<AudioBuffer, WavError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(WavError::Format(format!(
            "expected 16-bit integer PCM, got {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let channels = usize::from(spec.channels.max(1));
    let raw: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let raw = raw?;
    let frames = raw.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f64 = raw[f * channels..(f + 1) * channels]
            .iter()
            .map(|&s| f64::from(s) / 32768.0)
            .sum();
        samples.push((sum / channels as f64) as f32);
    }
    Ok(AudioBuffer { samples, sample_rate: spec.sample_rate })
}

/// Writes mono 16-bit PCM. Samples are clamped to `[-1, 1]` and rounded
/// half away from zero.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        let v = round_half_away(f64::from(s).clamp(-1.0, 1.0) * 32767.0);
        writer.write_sample(v as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::tone;

    #[test]
    fn roundtrip_preserves_samples_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let audio = tone(440.0, 0.25, 0.8, 16_000);
        write_wav(&path, &audio).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.len(), audio.samples.len());
        // Quantization plus the standard write-by-32767 / read-by-32768
        // scale asymmetry bounds the error by (|x| + 0.5) / 32768.
        for (a, b) in audio.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.5 / 32_768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn stereo_reads_as_channel_average() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        let frames: [(i16, i16); 3] = [(1000, 3000), (-2000, 2000), (400, 400)];
        for (l, r) in frames {
            writer.write_sample(l).unwrap();
            writer.write_sample(r).unwrap();
        }
        writer.finalize().unwrap();
        let audio = read_wav(&path).unwrap();
        assert_eq!(audio.samples.len(), 3);
        for (i, (l, r)) in frames.iter().enumerate() {
            let want = (f64::from(*l) + f64::from(*r)) / 2.0 / 32768.0;
            assert!((f64::from(audio.samples[i]) - want).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_float_wavs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(0.5f32).unwrap();
        writer.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::Format(_))));
    }
}
