//! Speech recognition: multi-scale convolutional acoustic models over log-mel
//! (or raw-audio) front ends, with offline and streaming inference paths that
//! produce identical posteriors.
//!
//! A model is a [`SpeechNet`] bundle: the compute graph, the front-end recipe
//! that turns audio into graph input columns, and the output vocabulary.
//! Streaming inference feeds audio in arbitrary chunks and emits exactly the
//! columns offline inference would, as soon as their dependencies exist.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{greedy_decode, CtcError};
use crate::dsp::{log_mel, normalize, AudioBuffer, DspError, FeatureConfig, NormStats};
use crate::exec::{graph_forward, ExecError, ExecOptions, StreamRunner, WindowedValue};
use crate::graph::{
    Conv1dParams, DenseParams, GraphError, GraphSpec, InputSpec, LayerOp, LayerSpec,
    RequantParams, INPUT_ID,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AsrError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("model bundle parse error: {0}")]
    Parse(String),
}

/// Output symbol set. Index 0 is always the CTC blank.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    /// Character vocabulary: blank, space, `a`..`z`, apostrophe (29 classes).
    pub fn alphabet() -> Self {
        let mut symbols = vec!["<blank>".to_string(), " ".to_string()];
        for c in b'a'..=b'z' {
            symbols.push((c as char).to_string());
        }
        symbols.push("'".to_string());
        Vocab { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        if index == 0 {
            None
        } else {
            self.symbols.get(index).map(|s| s.as_str())
        }
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, AsrError> {
        text.chars()
            .map(|c| {
                let s = c.to_string();
                self.symbols
                    .iter()
                    .position(|sym| *sym == s)
                    .ok_or_else(|| AsrError::Vocab(format!("symbol {c:?} not in vocabulary")))
            })
            .collect()
    }
}

/// One convolution stage inside a block path.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageSpec {
    pub channels: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

/// One kernel-size branch of a multi-scale block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathSpec {
    pub kernel: usize,
    pub stages: Vec<StageSpec>,
}

/// Multi-scale block: parallel conv paths at distinct kernel sizes, channel
/// concatenation, 1x1 projection, and an optional residual connection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MsBlockSpec {
    pub paths: Vec<PathSpec>,
    pub proj_channels: usize,
    pub residual: bool,
}

/// Strided conv stage of a learned raw-audio front end.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrontEndStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpeechNetConfig {
    pub name: String,
    /// Log-mel recipe; ignored by the graph when `front_end` is nonempty.
    pub features: FeatureConfig,
    /// Nonempty: the graph consumes raw audio through these strided convs.
    pub front_end: Vec<FrontEndStage>,
    pub blocks: Vec<MsBlockSpec>,
    pub classes: usize,
}

impl SpeechNetConfig {
    /// Structural checks. Returns non-fatal design warnings.
    pub fn validate(&self) -> Result<Vec<String>, AsrError> {
        let mut warnings = Vec::new();
        if self.classes < 2 {
            return Err(AsrError::Config("need at least blank plus one class".into()));
        }
        if self.blocks.is_empty() {
            return Err(AsrError::Config("need at least one block".into()));
        }
        for (fi, f) in self.front_end.iter().enumerate() {
            if f.channels == 0 || f.kernel == 0 || f.stride == 0 {
                return Err(AsrError::Config(format!(
                    "front-end stage {fi}: channels, kernel and stride must be positive"
                )));
            }
            if f.kernel < f.stride {
                warnings.push(format!(
                    "front-end stage {fi}: kernel {} below stride {} skips samples",
                    f.kernel, f.stride
                ));
            }
        }
        let mut in_channels = if self.front_end.is_empty() {
            self.features.mel_bands
        } else {
            self.front_end.last().expect("nonempty").channels
        };
        for (bi, b) in self.blocks.iter().enumerate() {
            if b.paths.len() < 2 {
                return Err(AsrError::Config(format!(
                    "block {bi}: a multi-scale block needs at least two paths"
                )));
            }
            if b.proj_channels == 0 {
                return Err(AsrError::Config(format!("block {bi}: proj_channels must be positive")));
            }
            for (pi, p) in b.paths.iter().enumerate() {
                if p.kernel == 0 {
                    return Err(AsrError::Config(format!(
                        "block {bi} path {pi}: kernel must be positive"
                    )));
                }
                if p.stages.len() < 2 {
                    return Err(AsrError::Config(format!(
                        "block {bi} path {pi}: need at least two stages"
                    )));
                }
                let mut past = 0usize;
                let mut future = 0usize;
                for (si, s) in p.stages.iter().enumerate() {
                    if s.channels == 0 {
                        return Err(AsrError::Config(format!(
                            "block {bi} path {pi} stage {si}: channels must be positive"
                        )));
                    }
                    if s.pad_left + s.pad_right > p.kernel - 1 {
                        warnings.push(format!(
                            "block {bi} path {pi} stage {si}: padding {}+{} exceeds kernel-1={}, some taps see only padding",
                            s.pad_left, s.pad_right, p.kernel - 1
                        ));
                    }
                    past += s.pad_left;
                    future += s.pad_right;
                }
                if future > past {
                    warnings.push(format!(
                        "block {bi} path {pi}: future context {future} exceeds past context {past}"
                    ));
                }
                for other in &b.paths[..pi] {
                    if other.kernel == p.kernel {
                        return Err(AsrError::Config(format!(
                            "block {bi}: duplicate path kernel {} defeats multi-scale analysis",
                            p.kernel
                        )));
                    }
                }
            }
            if b.residual && in_channels != b.proj_channels {
                return Err(AsrError::Config(format!(
                    "block {bi}: residual needs matching channels, input {} vs proj {}",
                    in_channels, b.proj_channels
                )));
            }
            in_channels = b.proj_channels;
        }
        Ok(warnings)
    }
}

fn he_conv(
    id: &str,
    input: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pl: usize,
    pr: usize,
    rng: &mut impl Rng,
) -> LayerSpec {
    let fan_in = (cin * k) as f64;
    let limit = (6.0 / fan_in).sqrt() as f32;
    let w: Vec<f32> = (0..cout * cin * k).map(|_| rng.gen_range(-limit..limit)).collect();
    let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
    LayerSpec {
        id: id.into(),
        inputs: vec![input.into()],
        op: LayerOp::Conv1d(Conv1dParams {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            dilation: 1,
            pad_left: pl,
            pad_right: pr,
            weights: Tensor::from_f32(vec![cout, cin, k], w).expect("weight shape"),
            bias: b,
            out_quant: None,
        }),
    }
}

fn relu(id: &str, input: &str) -> LayerSpec {
    LayerSpec { id: id.into(), inputs: vec![input.into()], op: LayerOp::Relu }
}

/// Builds the float compute graph for a config, with randomly initialized
/// weights drawn from `rng`. Returns the graph plus design warnings.
pub fn build_speechnet(
    cfg: &SpeechNetConfig,
    rng: &mut impl Rng,
) -> Result<(GraphSpec, Vec<String>), AsrError> {
    let warnings = cfg.validate()?;
    let mut layers = Vec::new();
    let mut cur = INPUT_ID.to_string();
    let mut channels;
    let input = if cfg.front_end.is_empty() {
        channels = cfg.features.mel_bands;
        InputSpec { shape: vec![channels, 0], time_axis: Some(1), quant: None }
    } else {
        channels = 1;
        InputSpec { shape: vec![1, 0], time_axis: Some(1), quant: None }
    };
    for (fi, f) in cfg.front_end.iter().enumerate() {
        let conv = format!("fe{fi}");
        layers.push(he_conv(
            &conv, &cur, channels, f.channels, f.kernel, f.stride, f.pad_left, f.pad_right, rng,
        ));
        let act = format!("fe{fi}_r");
        layers.push(relu(&act, &conv));
        cur = act;
        channels = f.channels;
    }
    for (bi, b) in cfg.blocks.iter().enumerate() {
        let block_in = cur.clone();
        let mut path_outs = Vec::new();
        for p in &b.paths {
            let mut pcur = block_in.clone();
            let mut pch = channels;
            for (si, s) in p.stages.iter().enumerate() {
                let conv = format!("b{bi}_k{}_s{si}", p.kernel);
                layers.push(he_conv(
                    &conv, &pcur, pch, s.channels, p.kernel, 1, s.pad_left, s.pad_right, rng,
                ));
                let act = format!("{conv}_r");
                layers.push(relu(&act, &conv));
                pcur = act;
                pch = s.channels;
            }
            path_outs.push((pcur, pch));
        }
        let cat = format!("b{bi}_cat");
        layers.push(LayerSpec {
            id: cat.clone(),
            inputs: path_outs.iter().map(|(id, _)| id.clone()).collect(),
            op: LayerOp::ConcatChannels(RequantParams { out_quant: None }),
        });
        let cat_ch: usize = path_outs.iter().map(|(_, c)| c).sum();
        let proj = format!("b{bi}_proj");
        layers.push(he_conv(&proj, &cat, cat_ch, b.proj_channels, 1, 1, 0, 0, rng));
        let proj_r = format!("b{bi}_proj_r");
        layers.push(relu(&proj_r, &proj));
        cur = if b.residual {
            let res = format!("b{bi}_res");
            layers.push(LayerSpec {
                id: res.clone(),
                inputs: vec![block_in, proj_r],
                op: LayerOp::ResidualAdd(RequantParams { out_quant: None }),
            });
            res
        } else {
            proj_r
        };
        channels = b.proj_channels;
    }
    let limit = (6.0 / channels as f64).sqrt() as f32;
    let w: Vec<f32> =
        (0..cfg.classes * channels).map(|_| rng.gen_range(-limit..limit)).collect();
    layers.push(LayerSpec {
        id: "head".into(),
        inputs: vec![cur],
        op: LayerOp::Dense(DenseParams {
            in_features: channels,
            out_features: cfg.classes,
            weights: Tensor::from_f32(vec![cfg.classes, channels], w).expect("head shape"),
            bias: vec![0.0; cfg.classes],
            out_quant: None,
        }),
    });
    layers.push(LayerSpec {
        id: "posteriors".into(),
        inputs: vec!["head".into()],
        op: LayerOp::Softmax,
    });
    let graph =
        GraphSpec { input, layers, outputs: vec!["posteriors".into()] };
    graph.validate()?;
    Ok((graph, warnings))
}

/// How audio becomes graph input columns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontEnd {
    /// Log-mel features normalized with fixed per-channel statistics.
    LogMel { config: FeatureConfig, norm: NormStats },
    /// Raw samples fed straight into the graph (learned front end).
    Raw { sample_rate: u32 },
}

impl FrontEnd {
    /// Rate of graph *input* columns per second.
    pub fn input_rate_hz(&self) -> f64 {
        match self {
            FrontEnd::LogMel { config, .. } => config.frame_rate_hz(),
            FrontEnd::Raw { sample_rate } => f64::from(*sample_rate),
        }
    }
}

/// A complete speech model: graph, front end, vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpeechNet {
    pub name: String,
    pub front_end: FrontEnd,
    pub graph: GraphSpec,
    pub vocab: Vocab,
}

impl SpeechNet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AsrError> {
        let net: SpeechNet = serde_json::from_str(s).map_err(|e| AsrError::Parse(e.to_string()))?;
        net.graph.validate()?;
        if net.graph.outputs.len() != 1 {
            return Err(AsrError::Config("speech model needs exactly one output".into()));
        }
        Ok(net)
    }

    pub fn output_id(&self) -> &str {
        self.graph.outputs[0].as_str()
    }

    /// Turns audio into the full `[C, T]` graph input.
    pub fn frontend_columns(&self, audio: &AudioBuffer) -> Result<Tensor, AsrError> {
        match &self.front_end {
            FrontEnd::LogMel { config, norm } => {
                let feats = log_mel(audio, config)?;
                Ok(normalize(&feats, norm)?)
            }
            FrontEnd::Raw { sample_rate } => {
                if audio.sample_rate != *sample_rate {
                    return Err(AsrError::Config(format!(
                        "model expects {sample_rate} Hz audio, got {}",
                        audio.sample_rate
                    )));
                }
                let n = audio.samples.len();
                Ok(Tensor::from_f32(vec![1, n], audio.samples.clone()).expect("audio shape"))
            }
        }
    }
}

/// Offline transcription result.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub text: String,
    pub labels: Vec<usize>,
    /// `[classes, frames]` posterior matrix.
    pub posteriors: Tensor,
}

/// Whole-utterance inference: front end, forward pass, greedy CTC.
pub fn transcribe_offline(
    net: &SpeechNet,
    audio: &AudioBuffer,
    opts: ExecOptions,
) -> Result<Transcription, AsrError> {
    let cols = net.frontend_columns(audio)?;
    let fwd = graph_forward(&net.graph, &cols, opts)?;
    let posteriors = fwd
        .outputs
        .get(net.output_id())
        .ok_or_else(|| AsrError::Config("model output missing".into()))?
        .clone();
    let labels = greedy_decode(&posteriors, net.vocab.blank())?;
    let text = net.vocab.decode(&labels);
    Ok(Transcription { text, labels, posteriors })
}

/// What one push (or finish) of a stream produced.
#[derive(Debug, Clone, Default)]
pub struct StreamUpdate {
    /// Newly final posterior columns, if any became ready.
    pub posteriors: Option<WindowedValue>,
    /// Labels appended to the transcript by those columns.
    pub new_labels: Vec<usize>,
    pub new_text: String,
}

/// Incremental recognizer. Push audio in chunks of any size; posteriors and
/// transcript grow exactly as offline inference over the same audio would
/// produce them.
pub struct AsrStream<'m> {
    net: &'m SpeechNet,
    runner: StreamRunner,
    sample_rate: u32,
    /// Raw samples not yet consumed by a complete frame.
    buf: Vec<f32>,
    /// Absolute sample index of `buf[0]`.
    buf_start: usize,
    /// Feature frames already fed to the runner.
    frames_fed: usize,
    prev_symbol: Option<usize>,
    labels: Vec<usize>,
    finished: bool,
}

impl<'m> AsrStream<'m> {
    pub fn new(net: &'m SpeechNet, sample_rate: u32) -> Result<Self, AsrError> {
        if let FrontEnd::Raw { sample_rate: want } = net.front_end {
            if sample_rate != want {
                return Err(AsrError::Config(format!(
                    "model expects {want} Hz audio, got {sample_rate}"
                )));
            }
        }
        if let FrontEnd::LogMel { config, .. } = &net.front_end {
            // Surface config problems at stream construction.
            log_mel(&AudioBuffer { samples: Vec::new(), sample_rate }, config)?;
        }
        Ok(AsrStream {
            net,
            runner: StreamRunner::new(&net.graph)?,
            sample_rate,
            buf: Vec::new(),
            buf_start: 0,
            frames_fed: 0,
            prev_symbol: None,
            labels: Vec::new(),
            finished: false,
        })
    }

    pub fn with_options(mut self, opts: ExecOptions) -> Self {
        self.runner = self.runner.with_options(opts);
        self
    }

    /// Transcript decoded so far.
    pub fn text(&self) -> String {
        self.net.vocab.decode(&self.labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// High-water mark of bytes retained inside the graph executor.
    pub fn peak_retained_bytes(&self) -> usize {
        self.runner.peak_retained_bytes()
    }

    pub fn push(&mut self, samples: &[f32]) -> Result<StreamUpdate, AsrError> {
        if self.finished {
            return Err(AsrError::Config("stream already finished".into()));
        }
        let cols = match &self.net.front_end {
            FrontEnd::LogMel { config, norm } => {
                self.buf.extend_from_slice(samples);
                let win = config.win_samples(self.sample_rate);
                let hop = config.hop_samples(self.sample_rate);
                let mut frames: Vec<Tensor> = Vec::new();
                loop {
                    let frame_start = self.frames_fed * hop;
                    let have_end = self.buf_start + self.buf.len();
                    if frame_start + win > have_end {
                        break;
                    }
                    let off = frame_start - self.buf_start;
                    let frame_audio = AudioBuffer {
                        samples: self.buf[off..off + win].to_vec(),
                        sample_rate: self.sample_rate,
                    };
                    let feats = log_mel(&frame_audio, config)?;
                    frames.push(normalize(&feats, norm)?);
                    self.frames_fed += 1;
                }
                // Drop samples no future frame can read.
                let needed_from = self.frames_fed * hop;
                if needed_from > self.buf_start {
                    let cut = (needed_from - self.buf_start).min(self.buf.len());
                    self.buf.drain(..cut);
                    self.buf_start += cut;
                }
                if frames.is_empty() {
                    None
                } else {
                    Some(hstack(&frames))
                }
            }
            FrontEnd::Raw { .. } => {
                if samples.is_empty() {
                    None
                } else {
                    Some(
                        Tensor::from_f32(vec![1, samples.len()], samples.to_vec())
                            .expect("audio shape"),
                    )
                }
            }
        };
        let outs = match cols {
            Some(c) => self.runner.push(&c)?,
            None => {
                let empty =
                    Tensor::from_f32(vec![self.net.graph.input.shape[0], 0], vec![])
                        .expect("empty input");
                self.runner.push(&empty)?
            }
        };
        Ok(self.absorb(outs))
    }

    /// Ends the utterance: applies right-edge padding and returns the last
    /// columns. Trailing samples shorter than one window are dropped, exactly
    /// as offline feature extraction drops them.
    pub fn finish(&mut self) -> Result<StreamUpdate, AsrError> {
        if self.finished {
            return Err(AsrError::Config("stream already finished".into()));
        }
        self.finished = true;
        let outs = self.runner.finish()?;
        Ok(self.absorb(outs))
    }

    fn absorb(
        &mut self,
        mut outs: std::collections::BTreeMap<String, WindowedValue>,
    ) -> StreamUpdate {
        let Some(wv) = outs.remove(self.net.output_id()) else {
            return StreamUpdate::default();
        };
        let mut new_labels = Vec::new();
        let t = wv.cols();
        let v = wv.tensor.shape()[0];
        let p = wv.tensor.as_f32().expect("posteriors are float");
        for frame in 0..t {
            let mut best = 0usize;
            for c in 1..v {
                if p[c * t + frame] > p[best * t + frame] {
                    best = c;
                }
            }
            if Some(best) != self.prev_symbol && best != self.net.vocab.blank() {
                new_labels.push(best);
            }
            self.prev_symbol = Some(best);
        }
        self.labels.extend_from_slice(&new_labels);
        let new_text = self.net.vocab.decode(&new_labels);
        StreamUpdate { posteriors: Some(wv), new_labels, new_text }
    }
}

/// Column-concatenates `[C, n_i]` tensors.
fn hstack(parts: &[Tensor]) -> Tensor {
    let c = parts[0].shape()[0];
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = vec![0.0f32; c * total];
    let mut at = 0usize;
    for p in parts {
        let n = p.shape()[1];
        let v = p.as_f32().expect("float columns");
        for ch in 0..c {
            out[ch * total + at..ch * total + at + n]
                .copy_from_slice(&v[ch * n..(ch + 1) * n]);
        }
        at += n;
    }
    Tensor::from_f32(vec![c, total], out).expect("stacked shape")
}

/// Reference acoustic model on log-mel features: four multi-scale blocks with
/// kernel 3 / 7 / 12 paths, 64 channels throughout, 29 output classes.
pub fn reference_speechnet1(seed: u64) -> SpeechNet {
    let k3 = PathSpec {
        kernel: 3,
        stages: vec![
            StageSpec { channels: 64, pad_left: 1, pad_right: 1 },
            StageSpec { channels: 64, pad_left: 1, pad_right: 1 },
            StageSpec { channels: 64, pad_left: 1, pad_right: 1 },
        ],
    };
    let k7 = PathSpec {
        kernel: 7,
        stages: vec![
            StageSpec { channels: 64, pad_left: 3, pad_right: 3 },
            StageSpec { channels: 64, pad_left: 3, pad_right: 3 },
            StageSpec { channels: 64, pad_left: 3, pad_right: 3 },
        ],
    };
    let k12 = PathSpec {
        kernel: 12,
        stages: vec![
            StageSpec { channels: 64, pad_left: 6, pad_right: 5 },
            StageSpec { channels: 64, pad_left: 7, pad_right: 4 },
            StageSpec { channels: 64, pad_left: 7, pad_right: 4 },
        ],
    };
    let block = |residual: bool| MsBlockSpec {
        paths: vec![k3.clone(), k7.clone(), k12.clone()],
        proj_channels: 64,
        residual,
    };
    let features = FeatureConfig::default();
    let cfg = SpeechNetConfig {
        name: "speechnet1".into(),
        features,
        front_end: Vec::new(),
        blocks: vec![block(false), block(true), block(true), block(true)],
        classes: Vocab::alphabet().len(),
    };
    let mut rng = crate::rng::rng_for_stream(seed, "speechnet1");
    let (graph, warnings) = build_speechnet(&cfg, &mut rng).expect("reference config is valid");
    assert!(warnings.is_empty(), "reference config warned: {warnings:?}");
    SpeechNet {
        name: cfg.name,
        front_end: FrontEnd::LogMel {
            config: features,
            norm: NormStats { mean: vec![-10.0; 64], std: vec![5.0; 64] },
        },
        graph,
        vocab: Vocab::alphabet(),
    }
}

/// Reference model with a learned raw-audio front end: four strided convs
/// (strides 5, 5, 4, 4; one column per 400 samples) feeding two multi-scale
/// blocks.
pub fn reference_speechnet2(seed: u64) -> SpeechNet {
    let front_end = vec![
        FrontEndStage { channels: 32, kernel: 10, stride: 5, pad_left: 4, pad_right: 5 },
        FrontEndStage { channels: 32, kernel: 10, stride: 5, pad_left: 4, pad_right: 5 },
        FrontEndStage { channels: 48, kernel: 8, stride: 4, pad_left: 3, pad_right: 4 },
        FrontEndStage { channels: 48, kernel: 8, stride: 4, pad_left: 3, pad_right: 4 },
    ];
    let block = |residual: bool| MsBlockSpec {
        paths: vec![
            PathSpec {
                kernel: 3,
                stages: vec![
                    StageSpec { channels: 48, pad_left: 1, pad_right: 1 },
                    StageSpec { channels: 48, pad_left: 1, pad_right: 1 },
                ],
            },
            PathSpec {
                kernel: 9,
                stages: vec![
                    StageSpec { channels: 48, pad_left: 4, pad_right: 4 },
                    StageSpec { channels: 48, pad_left: 4, pad_right: 4 },
                ],
            },
        ],
        proj_channels: 48,
        residual,
    };
    let cfg = SpeechNetConfig {
        name: "speechnet2".into(),
        features: FeatureConfig::default(),
        front_end,
        blocks: vec![block(false), block(true)],
        classes: Vocab::alphabet().len(),
    };
    let mut rng = crate::rng::rng_for_stream(seed, "speechnet2");
    let (graph, warnings) = build_speechnet(&cfg, &mut rng).expect("reference config is valid");
    assert!(warnings.is_empty(), "reference config warned: {warnings:?}");
    SpeechNet {
        name: cfg.name,
        front_end: FrontEnd::Raw { sample_rate: 16_000 },
        graph,
        vocab: Vocab::alphabet(),
    }
}
