//! Explicit layer-graph model format.
//!
//! A [`GraphSpec`] names one input, a topologically ordered list of layers,
//! and the layer ids exposed as outputs. Graphs come in two kinds, decided by
//! the input description: timewise graphs (`time_axis = 1`, shape `[C, T]`
//! with `T = 0` meaning variable length) processed by the windowed executor,
//! and static graphs (`time_axis` absent, shape `[C, H, W]`) processed in one
//! shot. The JSON wire form is stable and carries weights as base64
//! little-endian payloads inside each layer's `params`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{QuantParams, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown layer kind {0:?}")]
    UnknownLayerKind(String),
    #[error("graph parse error: {0}")]
    Parse(String),
    #[error("duplicate layer id {0:?}")]
    DuplicateId(String),
    #[error("layer id {0:?} is reserved")]
    ReservedId(String),
    #[error("layer {layer:?} references {input:?}, which is not the graph input or an earlier layer")]
    UnknownInput { layer: String, input: String },
    #[error("layer {layer:?} expects {expected} inputs, got {got}")]
    BadArity { layer: String, expected: String, got: usize },
    #[error("layer {0:?} is not reachable from the graph input")]
    Unreachable(String),
    #[error("unknown output {0:?}")]
    UnknownOutput(String),
    #[error("graph declares no outputs")]
    NoOutputs,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
}

/// Reserved producer id that layer inputs use to reference the graph input.
pub const INPUT_ID: &str = "input";

/// Exact rational stride of a layer's output grid relative to the input
/// frame grid: output index `o` lands at input position `floor(o * num / den)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    fn reduce(self) -> Ratio {
        fn gcd(a: u64, b: u64) -> u64 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(self.num, self.den).max(1);
        Ratio { num: self.num / g, den: self.den / g }
    }

    pub fn mul_int(self, s: u64) -> Ratio {
        Ratio { num: self.num * s, den: self.den }.reduce()
    }

    pub fn div_int(self, u: u64) -> Ratio {
        Ratio { num: self.num, den: self.den * u }.reduce()
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Input-grid position of output index `o`.
    pub fn position(self, o: i64) -> i64 {
        if o >= 0 {
            o * self.num as i64 / self.den as i64
        } else {
            (o * self.num as i64).div_euclid(self.den as i64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    /// `[C, T]` for timewise graphs (`T = 0` means variable length),
    /// `[C, H, W]` for static graphs.
    pub shape: Vec<usize>,
    /// Index of the time axis. Only `Some(1)` (timewise) or `None` (static)
    /// are accepted.
    #[serde(default)]
    pub time_axis: Option<usize>,
    /// Input quantization for quantized graphs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    /// `[out_channels, in_channels, kernel]`, float32 or int8-affine.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    /// Output quantization; required when the graph is quantized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    /// `[out_channels, in_channels, kernel_h, kernel_w]`.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleParams {
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequantParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerOp {
    Conv1d(Conv1dParams),
    Conv2d(Conv2dParams),
    Batchnorm(BatchNormParams),
    Relu,
    ResidualAdd(RequantParams),
    NearestUpsample(UpsampleParams),
    ConcatChannels(RequantParams),
    Dense(DenseParams),
    Softmax,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Conv1d(_) => "conv1d",
            LayerOp::Conv2d(_) => "conv2d",
            LayerOp::Batchnorm(_) => "batchnorm",
            LayerOp::Relu => "relu",
            LayerOp::ResidualAdd(_) => "residual_add",
            LayerOp::NearestUpsample(_) => "nearest_upsample",
            LayerOp::ConcatChannels(_) => "concat_channels",
            LayerOp::Dense(_) => "dense",
            LayerOp::Softmax => "softmax",
        }
    }

    /// Weight tensor for weighted ops.
    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            LayerOp::Conv1d(p) => Some(&p.weights),
            LayerOp::Conv2d(p) => Some(&p.weights),
            LayerOp::Dense(p) => Some(&p.weights),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: LayerOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Timewise,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spatial {
    Time { stride: Ratio },
    Grid { h: usize, w: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerMeta {
    pub channels: usize,
    pub spatial: Spatial,
}

#[derive(Debug, Clone)]
pub struct GraphMeta {
    pub kind: GraphKind,
    pub input: LayerMeta,
    pub layers: BTreeMap<String, LayerMeta>,
}

impl GraphMeta {
    pub fn meta_of(&self, id: &str) -> Option<&LayerMeta> {
        if id == INPUT_ID {
            Some(&self.input)
        } else {
            self.layers.get(id)
        }
    }
}

/// Whether the graph's weighted layers are all float or all quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Float,
    Quantized,
}

impl GraphSpec {
    /// Parses and validates a graph from its JSON wire form.
    pub fn from_json(json: &str) -> Result<GraphSpec, GraphError> {
        let g: GraphSpec = serde_json::from_str(json).map_err(|e| {
            let msg = e.to_string();
            if let Some(rest) = msg.strip_prefix("unknown variant `") {
                if let Some(end) = rest.find('`') {
                    return GraphError::UnknownLayerKind(rest[..end].to_string());
                }
            }
            GraphError::Parse(msg)
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialization cannot fail")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Classifies weighted layers as all-float or all-quantized.
    pub fn quant_mode(&self) -> Result<QuantMode, GraphError> {
        let mut float = 0usize;
        let mut quant = 0usize;
        for l in &self.layers {
            if let Some(w) = l.op.weights() {
                if w.is_quantized() {
                    quant += 1;
                } else {
                    float += 1;
                }
            }
        }
        match (float, quant) {
            (_, 0) => Ok(QuantMode::Float),
            (0, _) => Ok(QuantMode::Quantized),
            _ => Err(GraphError::InvalidParam(
                "graph mixes float and quantized weighted layers".to_string(),
            )),
        }
    }

    /// Validates structure and parameters, returning per-layer shape metadata.
    pub fn validate(&self) -> Result<GraphMeta, GraphError> {
        let kind = match self.input.time_axis {
            Some(1) => {
                if self.input.shape.len() != 2 {
                    return Err(GraphError::ShapeMismatch(format!(
                        "timewise input must be [channels, time], got {:?}",
                        self.input.shape
                    )));
                }
                GraphKind::Timewise
            }
            None => {
                if self.input.shape.len() != 3 {
                    return Err(GraphError::ShapeMismatch(format!(
                        "static input must be [channels, height, width], got {:?}",
                        self.input.shape
                    )));
                }
                GraphKind::Static
            }
            Some(ax) => {
                return Err(GraphError::InvalidParam(format!(
                    "time_axis must be 1 (timewise) or absent (static), got {ax}"
                )))
            }
        };
        if self.input.shape[0] == 0 {
            return Err(GraphError::ShapeMismatch("input channel count must be positive".into()));
        }
        let input_meta = match kind {
            GraphKind::Timewise => LayerMeta {
                channels: self.input.shape[0],
                spatial: Spatial::Time { stride: Ratio::ONE },
            },
            GraphKind::Static => {
                if self.input.shape[1] == 0 || self.input.shape[2] == 0 {
                    return Err(GraphError::ShapeMismatch(
                        "static input spatial dims must be positive".into(),
                    ));
                }
                LayerMeta {
                    channels: self.input.shape[0],
                    spatial: Spatial::Grid { h: self.input.shape[1], w: self.input.shape[2] },
                }
            }
        };

        let quant_mode = self.quant_mode()?;
        if quant_mode == QuantMode::Quantized && self.input.quant.is_none() {
            return Err(GraphError::InvalidParam(
                "quantized graph requires input quantization parameters".into(),
            ));
        }

        let mut metas: BTreeMap<String, LayerMeta> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut consumed: BTreeSet<&str> = BTreeSet::new();

        for layer in &self.layers {
            if layer.id.is_empty() {
                return Err(GraphError::InvalidParam("layer id must be non-empty".into()));
            }
            if layer.id == INPUT_ID {
                return Err(GraphError::ReservedId(layer.id.clone()));
            }
            if !seen.insert(&layer.id) {
                return Err(GraphError::DuplicateId(layer.id.clone()));
            }

            let expected_arity: (usize, bool) = match &layer.op {
                LayerOp::ResidualAdd(_) | LayerOp::ConcatChannels(_) => (2, true),
                _ => (1, false),
            };
            let (min_arity, variadic) = expected_arity;
            let ok_arity = if variadic {
                layer.inputs.len() >= min_arity
            } else {
                layer.inputs.len() == min_arity
            };
            if !ok_arity {
                return Err(GraphError::BadArity {
                    layer: layer.id.clone(),
                    expected: if variadic {
                        format!("at least {min_arity}")
                    } else {
                        format!("exactly {min_arity}")
                    },
                    got: layer.inputs.len(),
                });
            }

            let mut in_metas: Vec<LayerMeta> = Vec::with_capacity(layer.inputs.len());
            for inp in &layer.inputs {
                let m = if inp == INPUT_ID {
                    input_meta
                } else if let Some(m) = metas.get(inp.as_str()) {
                    *m
                } else {
                    return Err(GraphError::UnknownInput {
                        layer: layer.id.clone(),
                        input: inp.clone(),
                    });
                };
                consumed.insert(inp.as_str());
                in_metas.push(m);
            }

            let out_meta = infer_layer_meta(kind, layer, &in_metas, quant_mode)?;
            metas.insert(layer.id.clone(), out_meta);
        }

        if self.outputs.is_empty() {
            return Err(GraphError::NoOutputs);
        }
        for out in &self.outputs {
            if !metas.contains_key(out) {
                return Err(GraphError::UnknownOutput(out.clone()));
            }
        }

        // Every layer must contribute to some output: walk back from outputs.
        let mut live: BTreeSet<&str> = self.outputs.iter().map(|s| s.as_str()).collect();
        for layer in self.layers.iter().rev() {
            if live.contains(layer.id.as_str()) {
                for inp in &layer.inputs {
                    live.insert(inp.as_str());
                }
            }
        }
        for layer in &self.layers {
            if !live.contains(layer.id.as_str()) {
                return Err(GraphError::Unreachable(layer.id.clone()));
            }
        }

        Ok(GraphMeta { kind, input: input_meta, layers: metas })
    }
}

fn check_bias_and_weights(
    id: &str,
    weights: &Tensor,
    expected_shape: &[usize],
    bias: &[f32],
    out_channels: usize,
) -> Result<(), GraphError> {
    if weights.shape() != expected_shape {
        return Err(GraphError::ShapeMismatch(format!(
            "layer {id:?}: weight shape {:?} does not match declared {:?}",
            weights.shape(),
            expected_shape
        )));
    }
    if bias.len() != out_channels {
        return Err(GraphError::ShapeMismatch(format!(
            "layer {id:?}: bias length {} does not match {out_channels} output channels",
            bias.len()
        )));
    }
    Ok(())
}

fn require_out_quant(
    id: &str,
    quant_mode: QuantMode,
    out_quant: Option<QuantParams>,
) -> Result<(), GraphError> {
    if quant_mode == QuantMode::Quantized && out_quant.is_none() {
        return Err(GraphError::InvalidParam(format!(
            "layer {id:?} requires out_quant in a quantized graph"
        )));
    }
    if let Some(q) = out_quant {
        QuantParams::new(q.scale, q.zero_point)
            .map_err(|e| GraphError::InvalidParam(format!("layer {id:?}: {e}")))?;
    }
    Ok(())
}

fn infer_layer_meta(
    kind: GraphKind,
    layer: &LayerSpec,
    inputs: &[LayerMeta],
    quant_mode: QuantMode,
) -> Result<LayerMeta, GraphError> {
    let id = &layer.id;
    let one = &inputs[0];
    match &layer.op {
        LayerOp::Conv1d(p) => {
            if kind != GraphKind::Timewise {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: conv1d requires a timewise graph"
                )));
            }
            if p.kernel == 0 || p.stride == 0 || p.dilation == 0 || p.out_channels == 0 {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: kernel, stride, dilation and out_channels must be positive"
                )));
            }
            if p.in_channels != one.channels {
                return Err(GraphError::ShapeMismatch(format!(
                    "layer {id:?}: declares {} input channels, producer has {}",
                    p.in_channels, one.channels
                )));
            }
            check_bias_and_weights(
                id,
                &p.weights,
                &[p.out_channels, p.in_channels, p.kernel],
                &p.bias,
                p.out_channels,
            )?;
            require_out_quant(id, quant_mode, p.out_quant)?;
            let stride = match one.spatial {
                Spatial::Time { stride } => stride.mul_int(p.stride as u64),
                Spatial::Grid { .. } => unreachable!("timewise graph has time spatial"),
            };
            Ok(LayerMeta { channels: p.out_channels, spatial: Spatial::Time { stride } })
        }
        LayerOp::Conv2d(p) => {
            if kind != GraphKind::Static {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: conv2d requires a static graph"
                )));
            }
            if p.kernel_h == 0 || p.kernel_w == 0 || p.stride_h == 0 || p.stride_w == 0 || p.out_channels == 0 {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: kernel, stride and out_channels must be positive"
                )));
            }
            if p.in_channels != one.channels {
                return Err(GraphError::ShapeMismatch(format!(
                    "layer {id:?}: declares {} input channels, producer has {}",
                    p.in_channels, one.channels
                )));
            }
            check_bias_and_weights(
                id,
                &p.weights,
                &[p.out_channels, p.in_channels, p.kernel_h, p.kernel_w],
                &p.bias,
                p.out_channels,
            )?;
            require_out_quant(id, quant_mode, p.out_quant)?;
            let (h, w) = match one.spatial {
                Spatial::Grid { h, w } => (h, w),
                Spatial::Time { .. } => unreachable!("static graph has grid spatial"),
            };
            let eff_h = h + p.pad_top + p.pad_bottom;
            let eff_w = w + p.pad_left + p.pad_right;
            if eff_h < p.kernel_h || eff_w < p.kernel_w {
                return Err(GraphError::ShapeMismatch(format!(
                    "layer {id:?}: padded input {eff_h}x{eff_w} smaller than kernel {}x{}",
                    p.kernel_h, p.kernel_w
                )));
            }
            let h_out = (eff_h - p.kernel_h) / p.stride_h + 1;
            let w_out = (eff_w - p.kernel_w) / p.stride_w + 1;
            Ok(LayerMeta { channels: p.out_channels, spatial: Spatial::Grid { h: h_out, w: w_out } })
        }
        LayerOp::Batchnorm(p) => {
            let c = one.channels;
            if p.gamma.len() != c || p.beta.len() != c || p.mean.len() != c || p.var.len() != c {
                return Err(GraphError::ShapeMismatch(format!(
                    "layer {id:?}: batchnorm parameter lengths must equal {c} channels"
                )));
            }
            for (i, &v) in p.var.iter().enumerate() {
                if f64::from(v) + p.eps <= 0.0 {
                    return Err(GraphError::NumericalError(format!(
                        "layer {id:?}: var[{i}] + eps is not positive"
                    )));
                }
            }
            require_out_quant(id, quant_mode, p.out_quant)?;
            Ok(*one)
        }
        LayerOp::Relu => Ok(*one),
        LayerOp::Softmax => {
            if kind != GraphKind::Timewise {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: softmax requires a timewise graph"
                )));
            }
            Ok(*one)
        }
        LayerOp::NearestUpsample(p) => {
            if kind != GraphKind::Timewise {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: nearest_upsample requires a timewise graph"
                )));
            }
            if p.factor == 0 {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: upsample factor must be positive"
                )));
            }
            let stride = match one.spatial {
                Spatial::Time { stride } => stride.div_int(p.factor as u64),
                Spatial::Grid { .. } => unreachable!(),
            };
            Ok(LayerMeta { channels: one.channels, spatial: Spatial::Time { stride } })
        }
        LayerOp::ResidualAdd(p) => {
            for m in &inputs[1..] {
                if m != one {
                    return Err(GraphError::ShapeMismatch(format!(
                        "layer {id:?}: residual_add inputs must share channels and layout"
                    )));
                }
            }
            require_out_quant(id, quant_mode, p.out_quant)?;
            Ok(*one)
        }
        LayerOp::ConcatChannels(p) => {
            let mut channels = 0usize;
            for m in inputs {
                if m.spatial != one.spatial {
                    return Err(GraphError::ShapeMismatch(format!(
                        "layer {id:?}: concat_channels inputs must share spatial layout"
                    )));
                }
                channels += m.channels;
            }
            require_out_quant(id, quant_mode, p.out_quant)?;
            Ok(LayerMeta { channels, spatial: one.spatial })
        }
        LayerOp::Dense(p) => {
            if kind != GraphKind::Timewise {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: dense requires a timewise graph"
                )));
            }
            if p.out_features == 0 {
                return Err(GraphError::InvalidParam(format!(
                    "layer {id:?}: out_features must be positive"
                )));
            }
            if p.in_features != one.channels {
                return Err(GraphError::ShapeMismatch(format!(
                    "layer {id:?}: declares {} input features, producer has {} channels",
                    p.in_features, one.channels
                )));
            }
            check_bias_and_weights(
                id,
                &p.weights,
                &[p.out_features, p.in_features],
                &p.bias,
                p.out_features,
            )?;
            require_out_quant(id, quant_mode, p.out_quant)?;
            Ok(LayerMeta { channels: p.out_features, spatial: one.spatial })
        }
    }
}

/// Folds a batch-norm layer into the preceding convolution, producing a
/// single convolution with identical float behaviour.
///
/// With `d = sqrt(var + eps)` per output channel, the folded weights are
/// `w * gamma / d` and the folded bias is `(b - mean) * gamma / d + beta`.
pub fn fold_batchnorm(conv: &Conv1dParams, bn: &BatchNormParams) -> Result<Conv1dParams, GraphError> {
    let c = conv.out_channels;
    if bn.gamma.len() != c || bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
        return Err(GraphError::ShapeMismatch(format!(
            "batchnorm parameter lengths must equal {c} conv output channels"
        )));
    }
    let w = conv
        .weights
        .as_f32()
        .map_err(|_| GraphError::InvalidParam("fold_batchnorm requires float weights".into()))?;
    let per_in = conv.in_channels * conv.kernel;
    let mut scale = vec![0.0f64; c];
    for o in 0..c {
        let denom_sq = f64::from(bn.var[o]) + bn.eps;
        if denom_sq <= 0.0 {
            return Err(GraphError::NumericalError(format!(
                "var[{o}] + eps is not positive"
            )));
        }
        scale[o] = f64::from(bn.gamma[o]) / denom_sq.sqrt();
    }
    let mut w2 = vec![0.0f32; w.len()];
    for o in 0..c {
        for j in 0..per_in {
            w2[o * per_in + j] = (f64::from(w[o * per_in + j]) * scale[o]) as f32;
        }
    }
    let mut b2 = vec![0.0f32; c];
    for o in 0..c {
        b2[o] = ((f64::from(conv.bias[o]) - f64::from(bn.mean[o])) * scale[o]
            + f64::from(bn.beta[o])) as f32;
    }
    Ok(Conv1dParams {
        weights: Tensor::from_f32(vec![c, conv.in_channels, conv.kernel], w2)
            .expect("folded weight shape matches"),
        bias: b2,
        out_quant: bn.out_quant.or(conv.out_quant),
        ..conv.clone()
    })
}
