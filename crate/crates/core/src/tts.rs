//! Text-to-speech: a four-stage pipeline of timewise graphs.
//!
//! Text symbols become one-hot columns, an encoder maps them to hidden
//! state, a duration predictor assigns each symbol an integer frame count,
//! a length regulator repeats hidden columns per duration, a decoder turns
//! frames into a spectrogram-like representation, and a neural vocoder
//! upsamples frames to waveform samples (5 * 5 * 4 * 4 = 400 samples per
//! frame). Encoder, duration predictor, and decoder must be
//! length-preserving; the vocoder must multiply length by exactly the
//! sample-per-frame factor. The vocoder runs offline or in streamed chunks
//! with bitwise identical output.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::AudioBuffer;
use crate::exec::{graph_forward, ExecError, ExecOptions, StreamRunner};
use crate::graph::{GraphError, GraphSpec, InputSpec, LayerSpec, Ratio, Spatial, UpsampleParams};
use crate::tensor::{round_half_away, Tensor};

#[derive(Debug, Error)]
pub enum TtsError {
    #[error("tts config error: {0}")]
    Config(String),
    #[error("text error: {0}")]
    Text(String),
    #[error("synthesis produced no frames")]
    EmptyOutput,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("bundle parse error: {0}")]
    Parse(String),
}

/// Input symbol set for synthesis: space, `a`..`z`, apostrophe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextVocab {
    symbols: Vec<String>,
}

impl TextVocab {
    pub fn characters() -> Self {
        let mut symbols = vec![" ".to_string()];
        for c in b'a'..=b'z' {
            symbols.push((c as char).to_string());
        }
        symbols.push("'".to_string());
        TextVocab { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TtsError> {
        text.chars()
            .map(|c| {
                let s = c.to_string();
                self.symbols
                    .iter()
                    .position(|sym| *sym == s)
                    .ok_or_else(|| TtsError::Text(format!("symbol {c:?} not in vocabulary")))
            })
            .collect()
    }
}

/// One-hot `[V, T]` encoding of symbol ids.
pub fn one_hot(ids: &[usize], classes: usize) -> Result<Tensor, TtsError> {
    let t = ids.len();
    let mut out = vec![0.0f32; classes * t];
    for (col, &id) in ids.iter().enumerate() {
        if id >= classes {
            return Err(TtsError::Text(format!("symbol id {id} out of range {classes}")));
        }
        out[id * t + col] = 1.0;
    }
    Ok(Tensor::from_f32(vec![classes, t], out).expect("one-hot shape"))
}

/// Repeats hidden column `i` exactly `durations[i]` times.
pub fn length_regulate(hidden: &Tensor, durations: &[usize]) -> Result<Tensor, TtsError> {
    let shape = hidden.shape();
    if shape.len() != 2 {
        return Err(TtsError::Config(format!("hidden must be [H, T], got {shape:?}")));
    }
    let (h, t) = (shape[0], shape[1]);
    if durations.len() != t {
        return Err(TtsError::Config(format!(
            "{} durations for {t} symbols",
            durations.len()
        )));
    }
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(TtsError::EmptyOutput);
    }
    let v = hidden
        .as_f32()
        .map_err(|_| TtsError::Config("hidden state must be float".into()))?;
    let mut out = vec![0.0f32; h * total];
    for ch in 0..h {
        let mut at = 0usize;
        for (col, &d) in durations.iter().enumerate() {
            let val = v[ch * t + col];
            for slot in &mut out[ch * total + at..ch * total + at + d] {
                *slot = val;
            }
            at += d;
        }
    }
    Ok(Tensor::from_f32(vec![h, total], out).expect("regulated shape"))
}

/// Complete synthesis model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TtsBundle {
    pub name: String,
    pub vocab: TextVocab,
    pub sample_rate: u32,
    /// One-hot text columns to hidden state, length-preserving.
    pub encoder: GraphSpec,
    /// Hidden state to one duration logit per symbol, length-preserving.
    pub duration: GraphSpec,
    /// Regulated frames to spectrogram frames, length-preserving.
    pub decoder: GraphSpec,
    /// Spectrogram frames to waveform samples (fixed upsampling ratio).
    pub vocoder: GraphSpec,
}

fn output_stride(g: &GraphSpec) -> Result<Ratio, TtsError> {
    let meta = g.validate()?;
    if g.outputs.len() != 1 {
        return Err(TtsError::Config("each stage needs exactly one output".into()));
    }
    match &meta.layers[g.outputs[0].as_str()].spatial {
        Spatial::Time { stride } => Ok(*stride),
        _ => Err(TtsError::Config("tts stages must be timewise".into())),
    }
}

fn check_length_preserving(name: &str, g: &GraphSpec) -> Result<(), TtsError> {
    let stride = output_stride(g)?;
    if stride != Ratio::ONE {
        return Err(TtsError::Config(format!(
            "{name} must be length-preserving, output stride is {}/{}",
            stride.num, stride.den
        )));
    }
    // Stride one still allows trimming; require same-padding so n columns in
    // means n columns out.
    for layer in &g.layers {
        if let crate::graph::LayerOp::Conv1d(p) = &layer.op {
            if p.pad_left + p.pad_right != p.dilation * (p.kernel - 1) {
                return Err(TtsError::Config(format!(
                    "{name} layer {:?} trims or grows the sequence: pads {}+{} vs span {}",
                    layer.id,
                    p.pad_left,
                    p.pad_right,
                    p.dilation * (p.kernel - 1)
                )));
            }
        }
    }
    Ok(())
}

impl TtsBundle {
    /// Structural validation of the four stages and their interfaces.
    pub fn validate(&self) -> Result<(), TtsError> {
        if self.sample_rate == 0 {
            return Err(TtsError::Config("sample rate must be positive".into()));
        }
        check_length_preserving("encoder", &self.encoder)?;
        check_length_preserving("duration predictor", &self.duration)?;
        check_length_preserving("decoder", &self.decoder)?;
        let voc_stride = output_stride(&self.vocoder)?;
        if voc_stride.num != 1 || voc_stride.den < 2 {
            return Err(TtsError::Config(format!(
                "vocoder must upsample by an integer factor, output stride is {}/{}",
                voc_stride.num, voc_stride.den
            )));
        }
        let enc_meta = self.encoder.validate()?;
        if self.encoder.input.shape[0] != self.vocab.len() {
            return Err(TtsError::Config(format!(
                "encoder consumes {} channels but the vocabulary has {} symbols",
                self.encoder.input.shape[0],
                self.vocab.len()
            )));
        }
        let hidden = enc_meta.layers[self.encoder.outputs[0].as_str()].channels;
        if self.duration.input.shape[0] != hidden {
            return Err(TtsError::Config(format!(
                "duration predictor consumes {} channels, encoder produces {hidden}",
                self.duration.input.shape[0]
            )));
        }
        let dur_meta = self.duration.validate()?;
        if dur_meta.layers[self.duration.outputs[0].as_str()].channels != 1 {
            return Err(TtsError::Config("duration predictor must emit one channel".into()));
        }
        if self.decoder.input.shape[0] != hidden {
            return Err(TtsError::Config(format!(
                "decoder consumes {} channels, encoder produces {hidden}",
                self.decoder.input.shape[0]
            )));
        }
        let dec_meta = self.decoder.validate()?;
        let mel = dec_meta.layers[self.decoder.outputs[0].as_str()].channels;
        if self.vocoder.input.shape[0] != mel {
            return Err(TtsError::Config(format!(
                "vocoder consumes {} channels, decoder produces {mel}",
                self.vocoder.input.shape[0]
            )));
        }
        let voc_meta = self.vocoder.validate()?;
        if voc_meta.layers[self.vocoder.outputs[0].as_str()].channels != 1 {
            return Err(TtsError::Config("vocoder must emit one waveform channel".into()));
        }
        Ok(())
    }

    /// Waveform samples produced per spectrogram frame.
    pub fn samples_per_frame(&self) -> Result<usize, TtsError> {
        let stride = output_stride(&self.vocoder)?;
        Ok(stride.den as usize)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TtsError> {
        let b: TtsBundle = serde_json::from_str(s).map_err(|e| TtsError::Parse(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }
}

/// Spectrogram-stage inference result.
#[derive(Debug, Clone)]
pub struct SpectrogramResult {
    /// `[mel, frames]` decoder output.
    pub mel: Tensor,
    /// Frames assigned to each input symbol.
    pub durations: Vec<usize>,
}

/// Runs text through encoder, duration predictor (unless `durations_override`
/// is given), length regulator, and decoder.
pub fn spectrogram_infer(
    bundle: &TtsBundle,
    text: &str,
    durations_override: Option<&[usize]>,
    opts: ExecOptions,
) -> Result<SpectrogramResult, TtsError> {
    let ids = bundle.vocab.encode(text)?;
    if ids.is_empty() {
        return Err(TtsError::EmptyOutput);
    }
    let cols = one_hot(&ids, bundle.vocab.len())?;
    let enc = graph_forward(&bundle.encoder, &cols, opts)?;
    let hidden = enc.outputs[bundle.encoder.outputs[0].as_str()].clone();

    let durations: Vec<usize> = match durations_override {
        Some(d) => {
            if d.len() != ids.len() {
                return Err(TtsError::Config(format!(
                    "{} duration overrides for {} symbols",
                    d.len(),
                    ids.len()
                )));
            }
            d.to_vec()
        }
        None => {
            let dur = graph_forward(&bundle.duration, &hidden, opts)?;
            let pred = &dur.outputs[bundle.duration.outputs[0].as_str()];
            let v = pred
                .as_f32()
                .map_err(|_| TtsError::Config("duration output must be float".into()))?;
            // Round half away from zero, floor at one frame per symbol.
            v.iter().map(|&x| round_half_away(f64::from(x)).max(1.0) as usize).collect()
        }
    };
    let regulated = length_regulate(&hidden, &durations)?;
    let dec = graph_forward(&bundle.decoder, &regulated, opts)?;
    let mel = dec.outputs[bundle.decoder.outputs[0].as_str()].clone();
    Ok(SpectrogramResult { mel, durations })
}

/// Offline vocoding: the whole spectrogram in one pass.
pub fn vocode_offline(
    bundle: &TtsBundle,
    mel: &Tensor,
    opts: ExecOptions,
) -> Result<AudioBuffer, TtsError> {
    let out = graph_forward(&bundle.vocoder, mel, opts)?;
    let wave = &out.outputs[bundle.vocoder.outputs[0].as_str()];
    let samples = wave
        .as_f32()
        .map_err(|_| TtsError::Config("vocoder output must be float".into()))?
        .to_vec();
    Ok(AudioBuffer { samples, sample_rate: bundle.sample_rate })
}

/// Streamed vocoding: the spectrogram is fed in `chunk_frames`-sized spans
/// and waveform spans are collected as they become final. Returns the audio
/// (bitwise equal to [`vocode_offline`]) and the executor's retained-memory
/// high-water mark in bytes.
pub fn vocode_streaming(
    bundle: &TtsBundle,
    mel: &Tensor,
    chunk_frames: usize,
    opts: ExecOptions,
) -> Result<(AudioBuffer, usize), TtsError> {
    if chunk_frames == 0 {
        return Err(TtsError::Config("chunk_frames must be positive".into()));
    }
    let shape = mel.shape();
    if shape.len() != 2 {
        return Err(TtsError::Config(format!("mel must be [M, F], got {shape:?}")));
    }
    let frames = shape[1];
    let out_id = bundle.vocoder.outputs[0].as_str();
    let mut runner = StreamRunner::new(&bundle.vocoder)?.with_options(opts);
    let mut samples: Vec<f32> = Vec::new();
    let mut fed = 0usize;
    let absorb = |outs: std::collections::BTreeMap<String, crate::exec::WindowedValue>,
                      samples: &mut Vec<f32>|
     -> Result<(), TtsError> {
        if let Some(wv) = outs.get(out_id) {
            if wv.start as usize != samples.len() {
                return Err(TtsError::Config(format!(
                    "vocoder emitted a gap: have {} samples, new span starts at {}",
                    samples.len(),
                    wv.start
                )));
            }
            samples.extend_from_slice(
                wv.tensor
                    .as_f32()
                    .map_err(|_| TtsError::Config("vocoder output must be float".into()))?,
            );
        }
        Ok(())
    };
    while fed < frames {
        let n = chunk_frames.min(frames - fed);
        let chunk = slice_frames(mel, fed, n);
        fed += n;
        absorb(runner.push(&chunk)?, &mut samples)?;
    }
    absorb(runner.finish()?, &mut samples)?;
    Ok((
        AudioBuffer { samples, sample_rate: bundle.sample_rate },
        runner.peak_retained_bytes(),
    ))
}

fn slice_frames(t: &Tensor, from: usize, len: usize) -> Tensor {
    let c = t.shape()[0];
    let n = t.shape()[1];
    let v = t.as_f32().expect("float mel");
    let mut out = Vec::with_capacity(c * len);
    for ch in 0..c {
        out.extend_from_slice(&v[ch * n + from..ch * n + from + len]);
    }
    Tensor::from_f32(vec![c, len], out).expect("slice shape")
}

/// Full synthesis result.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub audio: AudioBuffer,
    pub mel: Tensor,
    pub durations: Vec<usize>,
}

/// Text to waveform, offline end to end.
pub fn synthesize(
    bundle: &TtsBundle,
    text: &str,
    opts: ExecOptions,
) -> Result<Synthesis, TtsError> {
    let spec = spectrogram_infer(bundle, text, None, opts)?;
    let audio = vocode_offline(bundle, &spec.mel, opts)?;
    Ok(Synthesis { audio, mel: spec.mel, durations: spec.durations })
}

/// Reference synthesis model: 32-channel encoder, bias-2 duration predictor
/// (about two frames per symbol), 64-channel decoder, and a 5*5*4*4 = 400x
/// upsampling vocoder at 16 kHz.
pub fn reference_tts(seed: u64) -> TtsBundle {
    use crate::graph::{Conv1dParams, LayerOp};

    let mut rng = crate::rng::rng_for_stream(seed, "tts");
    let conv = |id: &str,
                input: &str,
                cin: usize,
                cout: usize,
                k: usize,
                bias: f32,
                rng: &mut rand_chacha::ChaCha8Rng| {
        let fan_in = (cin * k) as f64;
        let limit = (6.0 / fan_in).sqrt() as f32;
        let w: Vec<f32> = (0..cout * cin * k).map(|_| rng.gen_range(-limit..limit)).collect();
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            op: LayerOp::Conv1d(Conv1dParams {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: 1,
                dilation: 1,
                pad_left: (k - 1) / 2,
                pad_right: k / 2,
                weights: Tensor::from_f32(vec![cout, cin, k], w).expect("weights"),
                bias: vec![bias; cout],
                out_quant: None,
            }),
        }
    };
    let relu = |id: &str, input: &str| LayerSpec {
        id: id.into(),
        inputs: vec![input.into()],
        op: LayerOp::Relu,
    };
    let up = |id: &str, input: &str, factor: usize| LayerSpec {
        id: id.into(),
        inputs: vec![input.into()],
        op: LayerOp::NearestUpsample(UpsampleParams { factor }),
    };
    let input = |c: usize| InputSpec { shape: vec![c, 0], time_axis: Some(1), quant: None };

    let vocab = TextVocab::characters();
    let encoder = GraphSpec {
        input: input(vocab.len()),
        layers: vec![
            conv("e1", crate::graph::INPUT_ID, vocab.len(), 32, 3, 0.0, &mut rng),
            relu("e1_r", "e1"),
            conv("e2", "e1_r", 32, 32, 3, 0.0, &mut rng),
            relu("e2_r", "e2"),
        ],
        outputs: vec!["e2_r".into()],
    };
    let duration = GraphSpec {
        input: input(32),
        layers: vec![
            conv("d1", crate::graph::INPUT_ID, 32, 16, 3, 0.0, &mut rng),
            relu("d1_r", "d1"),
            // Bias 2.0 centers predictions near two frames per symbol.
            conv("d2", "d1_r", 16, 1, 1, 2.0, &mut rng),
        ],
        outputs: vec!["d2".into()],
    };
    let decoder = GraphSpec {
        input: input(32),
        layers: vec![
            conv("g1", crate::graph::INPUT_ID, 32, 48, 5, 0.0, &mut rng),
            relu("g1_r", "g1"),
            conv("g2", "g1_r", 48, 64, 5, 0.0, &mut rng),
        ],
        outputs: vec!["g2".into()],
    };
    let vocoder = GraphSpec {
        input: input(64),
        layers: vec![
            up("u1", crate::graph::INPUT_ID, 5),
            conv("v1", "u1", 64, 48, 7, 0.0, &mut rng),
            relu("v1_r", "v1"),
            up("u2", "v1_r", 5),
            conv("v2", "u2", 48, 32, 7, 0.0, &mut rng),
            relu("v2_r", "v2"),
            up("u3", "v2_r", 4),
            conv("v3", "u3", 32, 16, 5, 0.0, &mut rng),
            relu("v3_r", "v3"),
            up("u4", "v3_r", 4),
            conv("v4", "u4", 16, 8, 5, 0.0, &mut rng),
            relu("v4_r", "v4"),
            conv("v5", "v4_r", 8, 1, 1, 0.0, &mut rng),
        ],
        outputs: vec!["v5".into()],
    };
    let bundle = TtsBundle {
        name: "tts1".into(),
        vocab,
        sample_rate: 16_000,
        encoder,
        duration,
        decoder,
        vocoder,
    };
    bundle.validate().expect("reference bundle is valid");
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_bundle_validates_and_upsamples_400x() {
        let b = reference_tts(0);
        assert_eq!(b.samples_per_frame().unwrap(), 400);
    }

    #[test]
    fn synthesis_length_is_durations_times_400() {
        let b = reference_tts(0);
        let out = synthesize(&b, "hello world", ExecOptions::default()).unwrap();
        assert_eq!(out.durations.len(), 11);
        assert!(out.durations.iter().all(|&d| d >= 1));
        let frames: usize = out.durations.iter().sum();
        assert_eq!(out.mel.shape(), &[64, frames]);
        assert_eq!(out.audio.samples.len(), frames * 400);
        assert_eq!(out.audio.sample_rate, 16_000);
    }

    #[test]
    fn duration_override_is_respected() {
        let b = reference_tts(1);
        let durations = vec![3usize, 1, 4, 1, 5];
        let spec =
            spectrogram_infer(&b, "earth", Some(&durations), ExecOptions::default()).unwrap();
        assert_eq!(spec.durations, durations);
        assert_eq!(spec.mel.shape()[1], 14);
    }

    #[test]
    fn length_regulator_repeats_columns() {
        let hidden = Tensor::from_f32(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = length_regulate(&hidden, &[2, 1, 3]).unwrap();
        assert_eq!(out.shape(), &[2, 6]);
        assert_eq!(
            out.as_f32().unwrap(),
            &[1.0, 1.0, 2.0, 3.0, 3.0, 3.0, 4.0, 4.0, 5.0, 6.0, 6.0, 6.0]
        );
        assert!(matches!(
            length_regulate(&hidden, &[0, 0, 0]),
            Err(TtsError::EmptyOutput)
        ));
        assert!(matches!(length_regulate(&hidden, &[1, 2]), Err(TtsError::Config(_))));
    }

    #[test]
    fn streamed_vocoder_is_bitwise_equal_to_offline() {
        let b = reference_tts(2);
        let spec = spectrogram_infer(&b, "counting stars", None, ExecOptions::default()).unwrap();
        let offline = vocode_offline(&b, &spec.mel, ExecOptions::default()).unwrap();
        let frames = spec.mel.shape()[1];
        for chunk in [1usize, 7, frames] {
            let (streamed, _) =
                vocode_streaming(&b, &spec.mel, chunk, ExecOptions::default()).unwrap();
            assert_eq!(streamed.samples.len(), offline.samples.len(), "chunk={chunk}");
            assert_eq!(streamed.samples, offline.samples, "chunk={chunk}");
        }
    }

    #[test]
    fn streamed_vocoder_memory_is_bounded() {
        let b = reference_tts(3);
        // Long mel input: memory high-water must not scale with length.
        let frames = 300usize;
        let mel = Tensor::from_f32(
            vec![64, frames],
            (0..64 * frames).map(|i| ((i % 97) as f32) / 97.0 - 0.5).collect(),
        )
        .unwrap();
        let offline = graph_forward(&b.vocoder, &mel, ExecOptions::default()).unwrap();
        let (_, peak) = vocode_streaming(&b, &mel, 1, ExecOptions::default()).unwrap();
        assert!(
            peak < offline.stats.peak_live_bytes / 10,
            "streaming retained {peak} bytes vs offline peak {}",
            offline.stats.peak_live_bytes
        );
    }

    #[test]
    fn empty_text_is_rejected() {
        let b = reference_tts(4);
        assert!(matches!(
            synthesize(&b, "", ExecOptions::default()),
            Err(TtsError::EmptyOutput)
        ));
        assert!(matches!(
            synthesize(&b, "Hello!", ExecOptions::default()),
            Err(TtsError::Text(_))
        ));
    }

    #[test]
    fn non_length_preserving_decoder_is_rejected() {
        let mut b = reference_tts(5);
        // Make g1 trim: drop one pad column.
        if let crate::graph::LayerOp::Conv1d(p) = &mut b.decoder.layers[0].op {
            p.pad_left = 0;
        }
        let err = b.validate().unwrap_err();
        assert!(err.to_string().contains("decoder"), "{err}");
    }

    #[test]
    fn bundle_json_roundtrip() {
        let b = reference_tts(6);
        let js = b.to_json();
        let back = TtsBundle::from_json(&js).unwrap();
        assert_eq!(b, back);
    }
}
