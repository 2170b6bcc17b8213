//! Static graph analysis and the float-to-int8 porting pipeline.
//!
//! The analyzer walks a timewise graph backwards, mapping an output index
//! interval to the exact interval of input frames it depends on. From that it
//! derives receptive field, lookahead, per-second multiply-accumulate load,
//! and a power estimate against a deployment [`Budget`]. The same interval
//! machinery drives streaming execution and sliding-window synthesis.
//!
//! [`impulse_probe`] measures dependencies empirically by perturbing one
//! input frame at a time, and exists as an independent check on the
//! arithmetic; [`port_model`] prunes, quantizes, and budget-checks a float
//! graph for deployment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{forward_windowed, ExecError, ExecOptions};
use crate::graph::{
    BatchNormParams, GraphError, GraphKind, GraphSpec, LayerOp, QuantMode, Ratio, Spatial,
    INPUT_ID,
};
use crate::tensor::{round_half_away, QuantParams, Tensor};

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("unknown output {0:?}")]
    UnknownOutput(String),
    #[error("operation requires a timewise graph")]
    NotTimewise,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("layer {0:?} pruned to all-zero weights")]
    DegenerateModel(String),
    #[error("estimated power {estimated_mw:.3} mW exceeds budget {budget_mw:.3} mW")]
    BudgetExceeded { estimated_mw: f64, budget_mw: f64, report: Box<PortReport> },
    #[error("internal analyzer error: {0}")]
    Internal(String),
}

/// Inclusive interval of input frame indices, or empty when an output is a
/// pure function of edge padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexInterval {
    Empty,
    Range { lo: i64, hi: i64 },
}

impl IndexInterval {
    pub fn width(&self) -> u64 {
        match self {
            IndexInterval::Empty => 0,
            IndexInterval::Range { lo, hi } => (hi - lo + 1) as u64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IntervalRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<i64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    empty: bool,
}

impl Serialize for IndexInterval {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = match self {
            IndexInterval::Empty => IntervalRepr { lo: None, hi: None, empty: true },
            IndexInterval::Range { lo, hi } => {
                IntervalRepr { lo: Some(*lo), hi: Some(*hi), empty: false }
            }
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for IndexInterval {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = IntervalRepr::deserialize(d)?;
        if repr.empty {
            Ok(IndexInterval::Empty)
        } else {
            match (repr.lo, repr.hi) {
                (Some(lo), Some(hi)) => Ok(IndexInterval::Range { lo, hi }),
                _ => Err(D::Error::custom("interval requires lo and hi or empty: true")),
            }
        }
    }
}

/// Deployment power budget and hardware efficiency assumptions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Budget {
    /// Tera-operations per second per watt sustained by the accelerator.
    pub tops_per_watt: f64,
    /// Operations counted per multiply-accumulate.
    pub ops_per_mac: u32,
    /// Floor below which the device cannot drop while computing, in mW.
    pub idle_floor_mw: f64,
    /// Budget the estimate is checked against, in mW.
    pub power_budget_mw: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { tops_per_watt: 55.0, ops_per_mac: 2, idle_floor_mw: 0.0, power_budget_mw: 50.0 }
    }
}

/// Estimated compute power in mW for a sustained MAC rate.
pub fn estimate_power(macs_per_second: f64, budget: &Budget) -> f64 {
    let ops = macs_per_second * f64::from(budget.ops_per_mac);
    let watts = ops / (budget.tops_per_watt * 1e12);
    (watts * 1000.0).max(budget.idle_floor_mw)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputAnalysis {
    pub output: String,
    pub receptive_field_frames: u64,
    pub lookahead_frames: u64,
    pub context_seconds: f64,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnalysisReport {
    pub frame_rate_hz: f64,
    pub per_output: Vec<OutputAnalysis>,
    pub per_layer_macs_per_second: BTreeMap<String, f64>,
    pub macs_per_second: f64,
    pub estimated_power_mw: f64,
    pub power_budget_mw: f64,
    pub budget_ok: bool,
}

/// Arithmetic (unclipped) input-frame span that output indices `[lo, hi]` of
/// `output_id` depend on. Negative positions denote left padding; positions
/// past the end of a finite sequence denote right padding.
pub fn dependency_span(
    g: &GraphSpec,
    output_id: &str,
    lo: i64,
    hi: i64,
) -> Result<(i64, i64), AnalyzerError> {
    let meta = g.validate()?;
    if meta.kind != GraphKind::Timewise {
        return Err(AnalyzerError::NotTimewise);
    }
    if !g.outputs.iter().any(|o| o == output_id) {
        return Err(AnalyzerError::UnknownOutput(output_id.to_string()));
    }
    if lo > hi {
        return Err(AnalyzerError::InvalidParam(format!("span [{lo}, {hi}] is reversed")));
    }
    Ok(arithmetic_span(g, output_id, lo, hi))
}

fn arithmetic_span(g: &GraphSpec, target: &str, lo: i64, hi: i64) -> (i64, i64) {
    let mut need: BTreeMap<&str, (i64, i64)> = BTreeMap::new();
    need.insert(target, (lo, hi));
    let mut input_need: Option<(i64, i64)> = None;
    let merge = |slot: &mut Option<(i64, i64)>, span: (i64, i64)| {
        *slot = Some(match slot {
            None => span,
            Some((a, b)) => ((*a).min(span.0), (*b).max(span.1)),
        });
    };
    for layer in g.layers.iter().rev() {
        let Some(&(lo, hi)) = need.get(layer.id.as_str()) else { continue };
        let (ilo, ihi) = match &layer.op {
            LayerOp::Conv1d(p) => {
                let s = p.stride as i64;
                let d = p.dilation as i64;
                let k = p.kernel as i64;
                let pl = p.pad_left as i64;
                (lo * s - pl, hi * s - pl + d * (k - 1))
            }
            LayerOp::NearestUpsample(p) => {
                let u = p.factor as i64;
                (lo.div_euclid(u), hi.div_euclid(u))
            }
            _ => (lo, hi),
        };
        for inp in &layer.inputs {
            if inp == INPUT_ID {
                merge(&mut input_need, (ilo, ihi));
            } else {
                let slot = need.entry(inp.as_str()).or_insert((ilo, ihi));
                slot.0 = slot.0.min(ilo);
                slot.1 = slot.1.max(ihi);
            }
        }
    }
    input_need.expect("output reachable from input")
}

/// Input frames that one output frame depends on, clipped to the sequence
/// start. [`IndexInterval::Empty`] means the output is derived entirely from
/// left padding.
pub fn dependency_interval(
    g: &GraphSpec,
    output_id: &str,
    output_frame_index: i64,
) -> Result<IndexInterval, AnalyzerError> {
    if output_frame_index < 0 {
        return Err(AnalyzerError::InvalidParam(format!(
            "output frame index {output_frame_index} is negative"
        )));
    }
    let (lo, hi) = dependency_span(g, output_id, output_frame_index, output_frame_index)?;
    if hi < 0 {
        Ok(IndexInterval::Empty)
    } else {
        Ok(IndexInterval::Range { lo: lo.max(0), hi })
    }
}

/// Cumulative output-grid stride of a layer relative to the input grid.
fn stride_of(meta: &crate::graph::GraphMeta, id: &str) -> Result<Ratio, AnalyzerError> {
    let m = meta
        .meta_of(id)
        .ok_or_else(|| AnalyzerError::Internal(format!("no metadata for {id:?}")))?;
    match m.spatial {
        Spatial::Time { stride } => Ok(stride),
        Spatial::Grid { .. } => Err(AnalyzerError::NotTimewise),
    }
}

/// First output index whose dependency span is clear of left padding, found
/// by doubling then binary search on the monotone span lower bound.
fn steady_state_index(g: &GraphSpec, output_id: &str) -> Result<i64, AnalyzerError> {
    let lo_of = |o: i64| arithmetic_span(g, output_id, o, o).0;
    if lo_of(0) >= 0 {
        return Ok(0);
    }
    let mut hi = 1i64;
    while lo_of(hi) < 0 {
        hi *= 2;
        if hi > 1 << 50 {
            return Err(AnalyzerError::Internal(
                "steady-state search did not converge".to_string(),
            ));
        }
    }
    let mut lo = 0i64;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if lo_of(mid) >= 0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Analyzes receptive field, lookahead, compute load, and power for every
/// declared output. `frame_rate_hz` is the input frame rate for timewise
/// graphs, or the full-graph invocation rate for static graphs.
pub fn analyze(
    g: &GraphSpec,
    frame_rate_hz: f64,
    budget: &Budget,
) -> Result<AnalysisReport, AnalyzerError> {
    if !(frame_rate_hz > 0.0) || !frame_rate_hz.is_finite() {
        return Err(AnalyzerError::InvalidParam(format!(
            "frame rate must be positive, got {frame_rate_hz}"
        )));
    }
    let meta = g.validate()?;
    let mut per_output = Vec::new();
    let mut per_layer_macs: BTreeMap<String, f64> = BTreeMap::new();

    match meta.kind {
        GraphKind::Timewise => {
            for out in &g.outputs {
                let stride = stride_of(&meta, out)?;
                let o_star = steady_state_index(g, out)?;
                let period = stride.den.min(100_000) as i64;
                let mut rf: u64 = 0;
                let mut look: i64 = 0;
                for p in 0..period {
                    let o = o_star + p;
                    let (lo, hi) = arithmetic_span(g, out, o, o);
                    rf = rf.max((hi - lo + 1) as u64);
                    look = look.max(hi - stride.position(o));
                }
                let lookahead = look.max(0) as u64;
                per_output.push(OutputAnalysis {
                    output: out.clone(),
                    receptive_field_frames: rf,
                    lookahead_frames: lookahead,
                    context_seconds: rf as f64 / frame_rate_hz,
                    latency_seconds: lookahead as f64 / frame_rate_hz,
                });
            }
            for layer in &g.layers {
                let macs_per_frame: u64 = match &layer.op {
                    LayerOp::Conv1d(p) => (p.kernel * p.in_channels * p.out_channels) as u64,
                    LayerOp::Dense(p) => (p.in_features * p.out_features) as u64,
                    _ => 0,
                };
                if macs_per_frame == 0 {
                    continue;
                }
                let stride = stride_of(&meta, &layer.id)?;
                let rate = frame_rate_hz * stride.den as f64 / stride.num as f64;
                per_layer_macs.insert(layer.id.clone(), macs_per_frame as f64 * rate);
            }
        }
        GraphKind::Static => {
            for out in &g.outputs {
                per_output.push(OutputAnalysis {
                    output: out.clone(),
                    receptive_field_frames: 1,
                    lookahead_frames: 0,
                    context_seconds: 1.0 / frame_rate_hz,
                    latency_seconds: 0.0,
                });
            }
            for layer in &g.layers {
                let macs_per_invocation: u64 = match (&layer.op, meta.meta_of(&layer.id)) {
                    (LayerOp::Conv2d(p), Some(m)) => {
                        let (h, w) = match m.spatial {
                            Spatial::Grid { h, w } => (h, w),
                            _ => (0, 0),
                        };
                        (p.kernel_h * p.kernel_w * p.in_channels * p.out_channels * h * w) as u64
                    }
                    _ => 0,
                };
                if macs_per_invocation == 0 {
                    continue;
                }
                per_layer_macs.insert(layer.id.clone(), macs_per_invocation as f64 * frame_rate_hz);
            }
        }
    }

    let macs_per_second: f64 = per_layer_macs.values().sum();
    let estimated_power_mw = estimate_power(macs_per_second, budget);
    Ok(AnalysisReport {
        frame_rate_hz,
        per_output,
        per_layer_macs_per_second: per_layer_macs,
        macs_per_second,
        estimated_power_mw,
        power_budget_mw: budget.power_budget_mw,
        budget_ok: estimated_power_mw <= budget.power_budget_mw,
    })
}

/// How [`impulse_probe`] evaluates the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Replace weights with ones, biases with zero, batch norms and softmax
    /// with identities, so no dependency can cancel or be masked.
    Structural,
    /// Probe the graph exactly as given. Zero weights, saturating
    /// quantization, or dead ReLU regions can mask real dependencies; this
    /// mode exists to demonstrate that limitation.
    AsIs,
}

/// Empirically measures which input frames influence one output frame by
/// perturbing frames one at a time against a zero baseline, returning the
/// hull of detected dependencies.
pub fn impulse_probe(
    g: &GraphSpec,
    output_id: &str,
    output_frame_index: i64,
    mode: ProbeMode,
) -> Result<IndexInterval, AnalyzerError> {
    let meta = g.validate()?;
    if meta.kind != GraphKind::Timewise {
        return Err(AnalyzerError::NotTimewise);
    }
    if !g.outputs.iter().any(|o| o == output_id) {
        return Err(AnalyzerError::UnknownOutput(output_id.to_string()));
    }
    if output_frame_index < 0 {
        return Err(AnalyzerError::InvalidParam("probe index is negative".to_string()));
    }

    let probe_graph = match mode {
        ProbeMode::Structural => structural_copy(g),
        ProbeMode::AsIs => g.clone(),
    };

    // Safe overestimate of how many input frames can influence the probed
    // output: push the index through every layer's worst-case geometry.
    let mut bound: i64 = output_frame_index + 1;
    for layer in probe_graph.layers.iter().rev() {
        match &layer.op {
            LayerOp::Conv1d(p) => {
                bound = bound * p.stride as i64
                    + (p.pad_left + p.pad_right) as i64
                    + (p.dilation * (p.kernel - 1)) as i64
                    + 1;
            }
            LayerOp::NearestUpsample(p) => {
                bound = bound.div_euclid(p.factor as i64) + 2;
            }
            _ => {}
        }
    }
    let t = (bound.max(output_frame_index + 1) as usize).min(1 << 22);
    let c = probe_graph.input.shape[0];

    let run = |input: &Tensor| -> Result<Vec<f32>, AnalyzerError> {
        let r = forward_windowed(&probe_graph, input, 0, true, ExecOptions::default())?;
        let wv = r
            .outputs
            .get(output_id)
            .ok_or_else(|| AnalyzerError::Internal("probe output missing".to_string()))?;
        let tensor = wv.tensor.dequantize();
        let v = tensor.as_f32().expect("dequantized").to_vec();
        let n = wv.cols();
        if (output_frame_index as usize) >= n {
            return Err(AnalyzerError::InvalidParam(format!(
                "output index {output_frame_index} not producible from {t} input frames"
            )));
        }
        let ch = tensor.shape()[0];
        Ok((0..ch).map(|co| v[co * n + output_frame_index as usize]).collect())
    };

    let zeros = Tensor::zeros(vec![c, t]);
    let baseline = run(&zeros)?;

    let mut min_dep: Option<i64> = None;
    let mut max_dep: Option<i64> = None;
    for j in 0..t {
        let mut v = vec![0.0f32; c * t];
        for ch in 0..c {
            v[ch * t + j] = 1.0;
        }
        let input = Tensor::from_f32(vec![c, t], v).expect("probe input");
        let col = run(&input)?;
        let differs = col.iter().zip(baseline.iter()).any(|(a, b)| a != b);
        if differs {
            let j = j as i64;
            min_dep = Some(min_dep.map_or(j, |m: i64| m.min(j)));
            max_dep = Some(max_dep.map_or(j, |m: i64| m.max(j)));
        }
    }
    match (min_dep, max_dep) {
        (Some(lo), Some(hi)) => Ok(IndexInterval::Range { lo, hi }),
        _ => Ok(IndexInterval::Empty),
    }
}

/// All-ones weights, zero biases, identity normalization, no softmax: the
/// graph's pure connectivity.
fn structural_copy(g: &GraphSpec) -> GraphSpec {
    let mut g2 = g.clone();
    g2.input.quant = None;
    for layer in &mut g2.layers {
        match &mut layer.op {
            LayerOp::Conv1d(p) => {
                let n = p.out_channels * p.in_channels * p.kernel;
                p.weights = Tensor::from_f32(
                    vec![p.out_channels, p.in_channels, p.kernel],
                    vec![1.0; n],
                )
                .expect("structural weights");
                p.bias = vec![0.0; p.out_channels];
                p.out_quant = None;
            }
            LayerOp::Dense(p) => {
                let n = p.out_features * p.in_features;
                p.weights = Tensor::from_f32(vec![p.out_features, p.in_features], vec![1.0; n])
                    .expect("structural weights");
                p.bias = vec![0.0; p.out_features];
                p.out_quant = None;
            }
            LayerOp::Batchnorm(p) => {
                let c = p.gamma.len();
                *p = BatchNormParams {
                    gamma: vec![1.0; c],
                    beta: vec![0.0; c],
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                    eps: 0.0,
                    out_quant: None,
                };
            }
            LayerOp::Softmax => {
                // Softmax is shift-invariant per frame and would hide a
                // uniform perturbation; ReLU is the identity on the
                // non-negative values a structural probe produces.
                layer.op = LayerOp::Relu;
            }
            LayerOp::ResidualAdd(rq) | LayerOp::ConcatChannels(rq) => {
                rq.out_quant = None;
            }
            LayerOp::Relu | LayerOp::NearestUpsample(_) | LayerOp::Conv2d(_) => {}
        }
    }
    g2
}

/// Options for [`port_model`].
#[derive(Debug, Clone)]
pub struct PortOptions {
    /// Float input used to measure activation ranges. When absent, ranges
    /// are propagated statically from `input_range`.
    pub calibration: Option<Tensor>,
    /// Assumed real range of graph inputs for static range propagation.
    pub input_range: (f64, f64),
}

impl Default for PortOptions {
    fn default() -> Self {
        PortOptions { calibration: None, input_range: (-1.0, 1.0) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerPortInfo {
    pub id: String,
    pub kind: String,
    /// Fraction of weight codes equal to the zero point after porting.
    pub weight_sparsity: f64,
    /// Fraction of weights zeroed by the prune step.
    pub pruned_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_zero_point: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_zero_point: Option<i32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PortReport {
    pub already_quantized: bool,
    pub layers: Vec<LayerPortInfo>,
    pub total_weights: u64,
    pub pruned_weights: u64,
    pub overall_sparsity: f64,
    pub macs_per_second: f64,
    pub estimated_power_mw: f64,
    pub power_budget_mw: f64,
    pub budget_ok: bool,
}

#[derive(Debug, Clone, Copy)]
struct RealRange {
    lo: f64,
    hi: f64,
}

impl RealRange {
    fn quant(self) -> QuantParams {
        let lo = self.lo.min(0.0);
        let hi = self.hi.max(0.0);
        let width = (hi - lo).max(1e-8);
        let scale = width / 255.0;
        let zp = round_half_away(-128.0 - lo / scale).clamp(-128.0, 127.0) as i32;
        QuantParams { scale, zero_point: zp }
    }
}

/// Prunes small weights, quantizes weights and activations to int8, and
/// checks the result against the power budget.
///
/// Already-quantized graphs pass through unchanged (with a fresh report), so
/// porting is idempotent. Activation ranges come from a calibration run when
/// provided, otherwise from static interval propagation over the assumed
/// input range widened to include edge padding.
pub fn port_model(
    g: &GraphSpec,
    budget: &Budget,
    prune_threshold: f64,
    frame_rate_hz: f64,
    opts: &PortOptions,
) -> Result<(GraphSpec, PortReport), AnalyzerError> {
    if prune_threshold < 0.0 || !prune_threshold.is_finite() {
        return Err(AnalyzerError::InvalidParam(format!(
            "prune threshold must be non-negative, got {prune_threshold}"
        )));
    }
    g.validate()?;
    let mode = g.quant_mode()?;

    let (ported, already_quantized, pruned_per_layer) = match mode {
        QuantMode::Quantized => (g.clone(), true, BTreeMap::new()),
        QuantMode::Float => {
            let mut g2 = g.clone();
            let mut pruned: BTreeMap<String, (u64, u64)> = BTreeMap::new();
            for layer in &mut g2.layers {
                let (weights, id): (&mut Tensor, &str) = match &mut layer.op {
                    LayerOp::Conv1d(p) => (&mut p.weights, &layer.id),
                    LayerOp::Conv2d(p) => (&mut p.weights, &layer.id),
                    LayerOp::Dense(p) => (&mut p.weights, &layer.id),
                    _ => continue,
                };
                let mut v = weights.as_f32().expect("float graph").to_vec();
                let mut zeroed = 0u64;
                for w in v.iter_mut() {
                    if (f64::from(*w)).abs() < prune_threshold {
                        *w = 0.0;
                        zeroed += 1;
                    }
                }
                let max_abs = v.iter().fold(0.0f64, |m, &x| m.max(f64::from(x).abs()));
                if max_abs == 0.0 {
                    return Err(AnalyzerError::DegenerateModel(id.to_string()));
                }
                pruned.insert(id.to_string(), (zeroed, v.len() as u64));
                let scale = max_abs / 127.0;
                let wq = QuantParams { scale, zero_point: 0 };
                let shape = weights.shape().to_vec();
                let float = Tensor::from_f32(shape, v).expect("pruned weights");
                *weights = float.quantize(wq).expect("weight quantization");
            }
            assign_activation_quant(g, &mut g2, opts)?;
            (g2, false, pruned)
        }
    };

    ported.validate()?;

    let mut layers = Vec::new();
    let mut total_weights = 0u64;
    let mut zero_codes_total = 0u64;
    let mut pruned_total = 0u64;
    for layer in &ported.layers {
        let (weights, out_quant) = match &layer.op {
            LayerOp::Conv1d(p) => (&p.weights, p.out_quant),
            LayerOp::Conv2d(p) => (&p.weights, p.out_quant),
            LayerOp::Dense(p) => (&p.weights, p.out_quant),
            _ => continue,
        };
        let (codes, wq) = weights.as_i8().map_err(|e| AnalyzerError::Internal(e.to_string()))?;
        let zero_codes = codes.iter().filter(|&&c| i32::from(c) == wq.zero_point).count() as u64;
        let n = codes.len() as u64;
        let (zeroed, _) = pruned_per_layer.get(&layer.id).copied().unwrap_or((0, n));
        total_weights += n;
        zero_codes_total += zero_codes;
        pruned_total += zeroed;
        layers.push(LayerPortInfo {
            id: layer.id.clone(),
            kind: layer.op.kind_name().to_string(),
            weight_sparsity: zero_codes as f64 / n as f64,
            pruned_fraction: zeroed as f64 / n as f64,
            weight_scale: Some(wq.scale),
            weight_zero_point: Some(wq.zero_point),
            out_scale: out_quant.map(|q| q.scale),
            out_zero_point: out_quant.map(|q| q.zero_point),
        });
    }

    let analysis = analyze(&ported, frame_rate_hz, budget)?;
    let report = PortReport {
        already_quantized,
        layers,
        total_weights,
        pruned_weights: pruned_total,
        overall_sparsity: if total_weights == 0 {
            0.0
        } else {
            zero_codes_total as f64 / total_weights as f64
        },
        macs_per_second: analysis.macs_per_second,
        estimated_power_mw: analysis.estimated_power_mw,
        power_budget_mw: budget.power_budget_mw,
        budget_ok: analysis.budget_ok,
    };
    if !report.budget_ok {
        return Err(AnalyzerError::BudgetExceeded {
            estimated_mw: report.estimated_power_mw,
            budget_mw: budget.power_budget_mw,
            report: Box::new(report),
        });
    }
    Ok((ported, report))
}

/// Computes activation quantization for every layer of `g2` (the pruned,
/// weight-quantized copy of float graph `g`).
fn assign_activation_quant(
    g: &GraphSpec,
    g2: &mut GraphSpec,
    opts: &PortOptions,
) -> Result<(), AnalyzerError> {
    let ranges: BTreeMap<String, RealRange> = match &opts.calibration {
        Some(input) => calibrated_ranges(g, input)?,
        None => propagated_ranges(g, opts.input_range)?,
    };

    let input_range = ranges
        .get(INPUT_ID)
        .copied()
        .ok_or_else(|| AnalyzerError::Internal("missing input range".to_string()))?;
    g2.input.quant = Some(input_range.quant());

    for layer in &mut g2.layers {
        let q = ranges.get(&layer.id).map(|r| r.quant());
        match &mut layer.op {
            LayerOp::Conv1d(p) => p.out_quant = q,
            LayerOp::Conv2d(p) => p.out_quant = q,
            LayerOp::Dense(p) => p.out_quant = q,
            LayerOp::Batchnorm(p) => p.out_quant = q,
            LayerOp::ResidualAdd(rq) | LayerOp::ConcatChannels(rq) => rq.out_quant = q,
            LayerOp::Relu | LayerOp::NearestUpsample(_) | LayerOp::Softmax => {}
        }
    }
    Ok(())
}

/// Activation ranges measured by running the float graph on a calibration
/// input, observing every layer.
fn calibrated_ranges(
    g: &GraphSpec,
    input: &Tensor,
) -> Result<BTreeMap<String, RealRange>, AnalyzerError> {
    let mut all_outputs = g.clone();
    all_outputs.outputs = g.layers.iter().map(|l| l.id.clone()).collect();
    let meta = all_outputs.validate()?;
    let mut ranges = BTreeMap::new();

    let observe = |t: &Tensor| -> RealRange {
        let f = t.dequantize();
        let v = f.as_f32().expect("dequantized");
        let mut lo = 0.0f64;
        let mut hi = 0.0f64;
        for &x in v {
            lo = lo.min(f64::from(x));
            hi = hi.max(f64::from(x));
        }
        RealRange { lo, hi }
    };
    ranges.insert(INPUT_ID.to_string(), observe(input));

    match meta.kind {
        GraphKind::Timewise => {
            let r = forward_windowed(&all_outputs, input, 0, true, ExecOptions::default())?;
            for (id, wv) in &r.outputs {
                ranges.insert(id.clone(), observe(&wv.tensor));
            }
        }
        GraphKind::Static => {
            let r = crate::exec::graph_forward(&all_outputs, input, ExecOptions::default())?;
            for (id, t) in &r.outputs {
                ranges.insert(id.clone(), observe(t));
            }
        }
    }
    Ok(ranges)
}

/// Conservative static activation ranges via interval arithmetic, with the
/// input interval widened to include the zero padding value.
fn propagated_ranges(
    g: &GraphSpec,
    input_range: (f64, f64),
) -> Result<BTreeMap<String, RealRange>, AnalyzerError> {
    let (a, b) = input_range;
    if !(a <= b) {
        return Err(AnalyzerError::InvalidParam(format!(
            "input range ({a}, {b}) is reversed"
        )));
    }
    let mut ranges: BTreeMap<String, RealRange> = BTreeMap::new();
    ranges.insert(INPUT_ID.to_string(), RealRange { lo: a.min(0.0), hi: b.max(0.0) });

    for layer in &g.layers {
        let ins: Vec<RealRange> = layer
            .inputs
            .iter()
            .map(|i| ranges.get(i.as_str()).copied().expect("validated producer"))
            .collect();
        let x = ins[0];
        let out = match &layer.op {
            LayerOp::Conv1d(p) => {
                weighted_range(p.weights.as_f32().expect("float graph"), &p.bias, x, p.out_channels)
            }
            LayerOp::Conv2d(p) => {
                weighted_range(p.weights.as_f32().expect("float graph"), &p.bias, x, p.out_channels)
            }
            LayerOp::Dense(p) => {
                weighted_range(p.weights.as_f32().expect("float graph"), &p.bias, x, p.out_features)
            }
            LayerOp::Batchnorm(p) => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for c in 0..p.gamma.len() {
                    let s = f64::from(p.gamma[c]) / (f64::from(p.var[c]) + p.eps).sqrt();
                    let off = f64::from(p.beta[c]) - f64::from(p.mean[c]) * s;
                    let (l, h) = if s >= 0.0 {
                        (x.lo * s + off, x.hi * s + off)
                    } else {
                        (x.hi * s + off, x.lo * s + off)
                    };
                    lo = lo.min(l);
                    hi = hi.max(h);
                }
                RealRange { lo, hi }
            }
            LayerOp::Relu => RealRange { lo: x.lo.max(0.0), hi: x.hi.max(0.0) },
            LayerOp::Softmax => RealRange { lo: 0.0, hi: 1.0 },
            LayerOp::NearestUpsample(_) => x,
            LayerOp::ResidualAdd(_) => {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for r in &ins {
                    lo += r.lo;
                    hi += r.hi;
                }
                RealRange { lo, hi }
            }
            LayerOp::ConcatChannels(_) => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in &ins {
                    lo = lo.min(r.lo);
                    hi = hi.max(r.hi);
                }
                RealRange { lo, hi }
            }
        };
        // Downstream zero padding reintroduces 0 at the edges of every
        // conv window, so keep 0 inside every interval.
        let out = RealRange { lo: out.lo.min(0.0), hi: out.hi.max(0.0) };
        ranges.insert(layer.id.clone(), out);
    }
    Ok(ranges)
}

fn weighted_range(w: &[f32], bias: &[f32], x: RealRange, out_channels: usize) -> RealRange {
    let per_out = w.len() / out_channels;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for o in 0..out_channels {
        let mut l = f64::from(bias[o]);
        let mut h = f64::from(bias[o]);
        for j in 0..per_out {
            let c = f64::from(w[o * per_out + j]);
            if c >= 0.0 {
                l += c * x.lo;
                h += c * x.hi;
            } else {
                l += c * x.hi;
                h += c * x.lo;
            }
        }
        lo = lo.min(l);
        hi = hi.max(h);
    }
    RealRange { lo, hi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv1dParams, InputSpec, LayerSpec, UpsampleParams};
    use rand::Rng;

    fn conv(
        id: &str,
        input: &str,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        d: usize,
        pl: usize,
        pr: usize,
    ) -> LayerSpec {
        let n = cout * cin * k;
        let w: Vec<f32> = (0..n).map(|i| 0.1 + (i % 7) as f32 * 0.05).collect();
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            op: LayerOp::Conv1d(Conv1dParams {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                dilation: d,
                pad_left: pl,
                pad_right: pr,
                weights: Tensor::from_f32(vec![cout, cin, k], w).unwrap(),
                bias: vec![0.01; cout],
                out_quant: None,
            }),
        }
    }

    fn timewise(layers: Vec<LayerSpec>, outputs: Vec<&str>) -> GraphSpec {
        GraphSpec {
            input: InputSpec { shape: vec![1, 0], time_axis: Some(1), quant: None },
            layers,
            outputs: outputs.into_iter().map(String::from).collect(),
        }
    }

    #[test]
    fn single_conv_interval() {
        // Kernel 5, dilation 2, pad_left 3: output o depends on [o-3, o+5].
        let g = timewise(vec![conv("c", INPUT_ID, 1, 1, 5, 1, 2, 3, 5)], vec!["c"]);
        assert_eq!(
            dependency_interval(&g, "c", 10).unwrap(),
            IndexInterval::Range { lo: 7, hi: 15 }
        );
        assert_eq!(
            dependency_interval(&g, "c", 1).unwrap(),
            IndexInterval::Range { lo: 0, hi: 6 }
        );
    }

    #[test]
    fn empty_interval_when_only_padding() {
        // Kernel 2, pad_left 5: output 0 reads frames [-5, -4], all padding.
        let g = timewise(vec![conv("c", INPUT_ID, 1, 1, 2, 1, 1, 5, 0)], vec!["c"]);
        assert_eq!(dependency_interval(&g, "c", 0).unwrap(), IndexInterval::Empty);
        assert_eq!(dependency_interval(&g, "c", 3).unwrap(), IndexInterval::Empty);
        assert_eq!(
            dependency_interval(&g, "c", 4).unwrap(),
            IndexInterval::Range { lo: 0, hi: 0 }
        );
    }

    #[test]
    fn upsample_floor_and_unknown_output() {
        let mut layers = vec![conv("c", INPUT_ID, 1, 1, 3, 1, 1, 1, 1)];
        layers.push(LayerSpec {
            id: "up".into(),
            inputs: vec!["c".into()],
            op: LayerOp::NearestUpsample(UpsampleParams { factor: 4 }),
        });
        let g = timewise(layers, vec!["up"]);
        // Output 11 of the upsampler reads conv output floor(11/4) = 2,
        // which reads input [1, 3].
        assert_eq!(
            dependency_interval(&g, "up", 11).unwrap(),
            IndexInterval::Range { lo: 1, hi: 3 }
        );
        assert!(matches!(
            dependency_interval(&g, "nope", 0),
            Err(AnalyzerError::UnknownOutput(_))
        ));
    }

    #[test]
    fn parallel_paths_take_hull() {
        let a = conv("a", INPUT_ID, 1, 1, 3, 1, 1, 1, 1);
        let b = conv("b", INPUT_ID, 1, 1, 9, 1, 1, 4, 4);
        let cat = LayerSpec {
            id: "cat".into(),
            inputs: vec!["a".into(), "b".into()],
            op: LayerOp::ConcatChannels(crate::graph::RequantParams { out_quant: None }),
        };
        let g = timewise(vec![a, b, cat], vec!["cat"]);
        assert_eq!(
            dependency_interval(&g, "cat", 10).unwrap(),
            IndexInterval::Range { lo: 6, hi: 14 }
        );
    }

    #[test]
    fn analyze_reports_rf_and_lookahead() {
        // Two convs: k5 pl2 pr2 then k3 pl2 pr0. Width 4+2+1 = 7,
        // lookahead = 2 + 0 = 2 at steady state.
        let g = timewise(
            vec![conv("c1", INPUT_ID, 1, 2, 5, 1, 1, 2, 2), conv("c2", "c1", 2, 1, 3, 1, 1, 2, 0)],
            vec!["c2"],
        );
        let r = analyze(&g, 40.0, &Budget::default()).unwrap();
        assert_eq!(r.per_output[0].receptive_field_frames, 7);
        assert_eq!(r.per_output[0].lookahead_frames, 2);
        assert!((r.per_output[0].context_seconds - 7.0 / 40.0).abs() < 1e-12);
        // MACs: c1 = 5*1*2 = 10/frame, c2 = 3*2*1 = 6/frame, at 40 Hz.
        assert!((r.macs_per_second - (10.0 + 6.0) * 40.0).abs() < 1e-9);
    }

    #[test]
    fn estimate_power_formula_and_floor() {
        let b = Budget { tops_per_watt: 55.0, ops_per_mac: 2, idle_floor_mw: 0.0, power_budget_mw: 50.0 };
        // 1.375e12 MACs/s = 2.75 TOPS at 2 ops per MAC.
        let p = estimate_power(1.375e12, &b);
        assert!((p - 50.0).abs() < 1e-9, "got {p}");
        let b2 = Budget { idle_floor_mw: 2.0, ..b };
        assert_eq!(estimate_power(0.0, &b2), 2.0);
    }

    #[test]
    fn probe_agrees_on_simple_conv() {
        let g = timewise(vec![conv("c", INPUT_ID, 1, 1, 5, 1, 2, 3, 5)], vec!["c"]);
        let probe = impulse_probe(&g, "c", 10, ProbeMode::Structural).unwrap();
        assert_eq!(probe, dependency_interval(&g, "c", 10).unwrap());
        let probe0 = impulse_probe(&g, "c", 0, ProbeMode::Structural).unwrap();
        // Arithmetic interval [-3, 5] clips to [0, 5]; every tap in range
        // exists here because dilation taps land on 1, 3, 5.
        match (probe0, dependency_interval(&g, "c", 0).unwrap()) {
            (IndexInterval::Range { lo: pl, hi: ph }, IndexInterval::Range { lo: al, hi: ah }) => {
                assert_eq!(ph, ah);
                assert!(pl >= al);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probe_as_is_is_masked_by_zero_weights() {
        let mut l = conv("c", INPUT_ID, 1, 1, 3, 1, 1, 1, 1);
        if let LayerOp::Conv1d(p) = &mut l.op {
            p.weights = Tensor::from_f32(vec![1, 1, 3], vec![0.0, 0.0, 0.0]).unwrap();
            p.bias = vec![0.5];
        }
        let g = timewise(vec![l], vec!["c"]);
        assert_eq!(impulse_probe(&g, "c", 5, ProbeMode::AsIs).unwrap(), IndexInterval::Empty);
        assert_eq!(
            impulse_probe(&g, "c", 5, ProbeMode::Structural).unwrap(),
            IndexInterval::Range { lo: 4, hi: 6 }
        );
    }

    #[test]
    fn port_quantizes_prunes_and_is_idempotent() {
        let mut rng = crate::rng::rng_for_seed(21);
        let mut layers = vec![conv("c1", INPUT_ID, 1, 4, 5, 1, 1, 2, 2), conv("c2", "c1", 4, 2, 3, 1, 1, 1, 1)];
        for l in &mut layers {
            if let LayerOp::Conv1d(p) = &mut l.op {
                let n = p.weights.len();
                let shape = p.weights.shape().to_vec();
                let w: Vec<f32> = (0..n)
                    .map(|_| {
                        if rng.gen_bool(0.3) {
                            rng.gen_range(-0.005..0.005)
                        } else {
                            rng.gen_range(-0.8..0.8f32).max(0.02)
                        }
                    })
                    .collect();
                p.weights = Tensor::from_f32(shape, w).unwrap();
            }
        }
        let g = timewise(layers, vec!["c2"]);
        let budget = Budget::default();
        let (ported, report) =
            port_model(&g, &budget, 0.01, 40.0, &PortOptions::default()).unwrap();
        assert!(!report.already_quantized);
        assert!(report.pruned_weights > 0);
        assert!(report.overall_sparsity > 0.0);
        assert_eq!(ported.quant_mode().unwrap(), QuantMode::Quantized);
        assert!(ported.input.quant.is_some());

        let (ported2, report2) =
            port_model(&ported, &budget, 0.01, 40.0, &PortOptions::default()).unwrap();
        assert!(report2.already_quantized);
        assert_eq!(ported.to_json(), ported2.to_json());
    }

    #[test]
    fn port_rejects_degenerate_model() {
        let g = timewise(vec![conv("c", INPUT_ID, 1, 1, 3, 1, 1, 1, 1)], vec!["c"]);
        match port_model(&g, &Budget::default(), 10.0, 40.0, &PortOptions::default()) {
            Err(AnalyzerError::DegenerateModel(id)) => assert_eq!(id, "c"),
            other => panic!("expected DegenerateModel, got {other:?}"),
        }
    }

    #[test]
    fn port_reports_budget_exceeded() {
        let g = timewise(vec![conv("c", INPUT_ID, 1, 64, 9, 1, 1, 4, 4)], vec!["c"]);
        let budget = Budget { power_budget_mw: 1e-9, ..Budget::default() };
        match port_model(&g, &budget, 0.0, 16000.0, &PortOptions::default()) {
            Err(AnalyzerError::BudgetExceeded { report, .. }) => {
                assert!(!report.budget_ok);
                assert!(report.estimated_power_mw > 1e-9);
            }
            other => panic!("expected BudgetExceeded, got {other:?}"),
        }
    }

    #[test]
    fn interval_serde_forms() {
        let r = IndexInterval::Range { lo: 3, hi: 9 };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"lo":3,"hi":9}"#);
        let e = IndexInterval::Empty;
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"empty":true}"#);
        assert_eq!(serde_json::from_str::<IndexInterval>(r#"{"lo":3,"hi":9}"#).unwrap(), r);
        assert_eq!(serde_json::from_str::<IndexInterval>(r#"{"empty":true}"#).unwrap(), e);
    }
}
