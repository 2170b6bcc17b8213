//! Graph execution.
//!
//! Timewise graphs are evaluated through a *windowed* executor: the caller
//! provides a contiguous span of input frames together with the absolute
//! index of the first frame and a flag saying whether the span ends at the
//! true end of the sequence. Each layer computes exactly the output indices
//! that are derivable from the span, using zero padding (or the zero point,
//! for quantized tensors) only at the true sequence edges. Offline inference
//! is the special case `start = 0, is_final = true`, which is what makes
//! chunked streaming execution agree with offline execution index for index.
//!
//! Static graphs (`[C, H, W]`) are evaluated in one shot.
//!
//! Float convolutions accumulate in `f64` over a fixed left-to-right tap
//! order, so results are bitwise reproducible regardless of worker count.
//! Quantized convolutions accumulate `(x - zx) * (w - zw)` products in `i32`
//! and requantize once per output element.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{
    GraphError, GraphKind, GraphSpec, LayerOp, QuantMode, INPUT_ID,
};
use crate::tensor::{QuantParams, Tensor, TensorData};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer:?}: weight and activation dtypes do not match")]
    DtypeMismatch { layer: String },
    #[error("layer {layer:?}: quantized execution requires out_quant")]
    MissingOutQuant { layer: String },
    #[error("quantized graph requires input quantization parameters")]
    MissingInputQuant,
    #[error("bad window: {0}")]
    BadWindow(String),
    #[error("internal executor error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    /// Parallelize convolution output channels across the ambient rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// High-water mark of live activation bytes (graph input included).
    pub peak_live_bytes: usize,
}

/// A span of columns of a timewise value: `tensor` is `[C, n]` and its first
/// column has absolute index `start` on the layer's own output grid.
#[derive(Debug, Clone)]
pub struct WindowedValue {
    pub start: i64,
    pub tensor: Tensor,
}

impl WindowedValue {
    pub fn cols(&self) -> usize {
        if self.tensor.shape().len() == 2 {
            self.tensor.shape()[1]
        } else {
            0
        }
    }

    /// Inclusive last absolute index, or `None` when the span is empty.
    pub fn end(&self) -> Option<i64> {
        let n = self.cols();
        if n == 0 {
            None
        } else {
            Some(self.start + n as i64 - 1)
        }
    }
}

#[derive(Debug)]
pub struct ForwardResult {
    pub outputs: BTreeMap<String, Tensor>,
    pub stats: ExecStats,
}

#[derive(Debug)]
pub struct WindowedResult {
    pub outputs: BTreeMap<String, WindowedValue>,
    pub stats: ExecStats,
}

/// Offline forward pass. For timewise graphs this is the windowed pass over
/// `[0, T)` with the final flag set; for static graphs a one-shot pass.
///
/// If the graph is quantized and a float input is supplied, the input is
/// quantized with the graph's input parameters first.
pub fn graph_forward(
    g: &GraphSpec,
    input: &Tensor,
    opts: ExecOptions,
) -> Result<ForwardResult, ExecError> {
    let meta = g.validate()?;
    match meta.kind {
        GraphKind::Timewise => {
            let w = forward_windowed(g, input, 0, true, opts)?;
            let mut outputs = BTreeMap::new();
            for (id, wv) in w.outputs {
                if wv.cols() > 0 && wv.start != 0 {
                    return Err(ExecError::Internal(format!(
                        "offline output {id:?} does not start at index 0"
                    )));
                }
                outputs.insert(id, wv.tensor);
            }
            Ok(ForwardResult { outputs, stats: w.stats })
        }
        GraphKind::Static => forward_static(g, input, opts),
    }
}

/// Windowed forward pass over a timewise graph.
///
/// `input` is `[C, n]` holding frames `[start, start + n)` of the sequence;
/// `is_final` declares that frame `start + n - 1` is the last of the whole
/// sequence. Outputs are spans on each output layer's own index grid.
pub fn forward_windowed(
    g: &GraphSpec,
    input: &Tensor,
    start: i64,
    is_final: bool,
    opts: ExecOptions,
) -> Result<WindowedResult, ExecError> {
    let meta = g.validate()?;
    if meta.kind != GraphKind::Timewise {
        return Err(ExecError::BadWindow("windowed execution requires a timewise graph".into()));
    }
    if start < 0 {
        return Err(ExecError::BadWindow(format!("window start {start} is negative")));
    }
    if input.shape().len() != 2 || input.shape()[0] != g.input.shape[0] {
        return Err(ExecError::ShapeMismatch(format!(
            "input window must be [{}, n], got {:?}",
            g.input.shape[0],
            input.shape()
        )));
    }

    let quant_mode = g.quant_mode()?;
    let input_val = prepare_input(g, input, quant_mode)?;

    let mut live = Liveness::new(g);
    let mut values: BTreeMap<&str, WindowedValue> =
        BTreeMap::new();
    let in_wv = WindowedValue { start, tensor: input_val };
    live.alloc(in_wv.tensor.payload_bytes());
    values.insert(INPUT_ID, in_wv);

    for layer in &g.layers {
        let ins: Vec<&WindowedValue> = layer
            .inputs
            .iter()
            .map(|i| values.get(i.as_str()).expect("validated producer"))
            .collect();
        let out = eval_timewise_layer(layer.id.as_str(), &layer.op, &ins, is_final, opts)?;
        live.alloc(out.tensor.payload_bytes());
        values.insert(layer.id.as_str(), out);
        for inp in &layer.inputs {
            if live.release(inp.as_str()) {
                if let Some(v) = values.remove(inp.as_str()) {
                    live.free(v.tensor.payload_bytes());
                }
            }
        }
    }

    let mut outputs = BTreeMap::new();
    for id in &g.outputs {
        let wv = values
            .get(id.as_str())
            .ok_or_else(|| ExecError::Internal(format!("output {id:?} vanished")))?;
        outputs.insert(id.clone(), wv.clone());
    }
    Ok(WindowedResult { outputs, stats: ExecStats { peak_live_bytes: live.peak } })
}

fn prepare_input(
    g: &GraphSpec,
    input: &Tensor,
    quant_mode: QuantMode,
) -> Result<Tensor, ExecError> {
    match quant_mode {
        QuantMode::Quantized => {
            if input.is_quantized() {
                Ok(input.clone())
            } else {
                let q = g.input.quant.ok_or(ExecError::MissingInputQuant)?;
                Ok(input.quantize(q).map_err(|e| ExecError::Internal(e.to_string()))?)
            }
        }
        QuantMode::Float => {
            if input.is_quantized() {
                Ok(input.dequantize())
            } else {
                Ok(input.clone())
            }
        }
    }
}

/// Consumer refcounts for live-activation accounting. Graph outputs get an
/// extra permanent reference so they are never dropped.
struct Liveness {
    remaining: BTreeMap<String, usize>,
    live: usize,
    peak: usize,
}

impl Liveness {
    fn new(g: &GraphSpec) -> Self {
        let mut remaining: BTreeMap<String, usize> = BTreeMap::new();
        remaining.insert(INPUT_ID.to_string(), 0);
        for l in &g.layers {
            remaining.insert(l.id.clone(), 0);
            for i in &l.inputs {
                *remaining.get_mut(i.as_str()).expect("validated producer") += 1;
            }
        }
        for o in &g.outputs {
            *remaining.get_mut(o.as_str()).expect("validated output") += 1;
        }
        Liveness { remaining, live: 0, peak: 0 }
    }

    fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, bytes: usize) {
        self.live = self.live.saturating_sub(bytes);
    }

    /// Decrements a producer's refcount; true when no consumers remain.
    fn release(&mut self, id: &str) -> bool {
        let r = self.remaining.get_mut(id).expect("known producer");
        *r = r.saturating_sub(1);
        *r == 0
    }
}

fn eval_timewise_layer(
    id: &str,
    op: &LayerOp,
    ins: &[&WindowedValue],
    is_final: bool,
    opts: ExecOptions,
) -> Result<WindowedValue, ExecError> {
    match op {
        LayerOp::Conv1d(p) => conv1d_window(id, p, ins[0], is_final, opts),
        LayerOp::Dense(p) => dense_window(id, p, ins[0], opts),
        LayerOp::Batchnorm(p) => batchnorm_window(id, p, ins[0]),
        LayerOp::Relu => Ok(relu_window(ins[0])),
        LayerOp::Softmax => Ok(softmax_window(ins[0])),
        LayerOp::NearestUpsample(p) => Ok(upsample_window(ins[0], p.factor)),
        LayerOp::ResidualAdd(rq) => residual_window(id, ins, rq.out_quant),
        LayerOp::ConcatChannels(rq) => concat_window(id, ins, rq.out_quant),
        LayerOp::Conv2d(_) => Err(ExecError::Internal(format!(
            "layer {id:?}: conv2d inside a timewise graph"
        ))),
    }
}

fn channels_of(wv: &WindowedValue) -> usize {
    wv.tensor.shape()[0]
}

fn empty_like(channels: usize, quant: Option<QuantParams>) -> WindowedValue {
    let tensor = match quant {
        None => Tensor::from_f32(vec![channels, 0], vec![]).expect("empty tensor"),
        Some(q) => Tensor::from_i8(vec![channels, 0], vec![], q).expect("empty tensor"),
    };
    WindowedValue { start: 0, tensor }
}

fn conv1d_window(
    id: &str,
    p: &crate::graph::Conv1dParams,
    x: &WindowedValue,
    is_final: bool,
    opts: ExecOptions,
) -> Result<WindowedValue, ExecError> {
    let k = p.kernel as i64;
    let s = p.stride as i64;
    let d = p.dilation as i64;
    let pl = p.pad_left as i64;
    let pr = p.pad_right as i64;
    let span = d * (k - 1);

    let n = x.cols();
    let out_q = p.out_quant;
    let quantized = p.weights.is_quantized();
    if n == 0 {
        return Ok(empty_like(p.out_channels, if quantized { out_q } else { None }));
    }
    let a = x.start;
    let b = a + n as i64 - 1;

    let o_min = if a == 0 { 0 } else { (a + pl + s - 1).div_euclid(s) };
    let right = if is_final { b + pl + pr - span } else { b + pl - span };
    let o_max = right.div_euclid(s);
    if o_max < o_min {
        return Ok(empty_like(p.out_channels, if quantized { out_q } else { None }));
    }
    let n_out = (o_max - o_min + 1) as usize;
    let c_out = p.out_channels;
    let c_in = p.in_channels;

    let tensor = match (&p.weights.data(), x.tensor.data()) {
        (TensorData::F32(w), TensorData::F32(xv)) => {
            let mut out = vec![0.0f32; c_out * n_out];
            let fill = |co: usize, row: &mut [f32]| {
                let wbase = co * c_in * (k as usize);
                for (oi, slot) in row.iter_mut().enumerate() {
                    let o = o_min + oi as i64;
                    let mut acc = f64::from(p.bias[co]);
                    for ci in 0..c_in {
                        let xrow = ci * n;
                        let wrow = wbase + ci * (k as usize);
                        for kk in 0..k {
                            let t = o * s - pl + d * kk;
                            if t < a || t > b {
                                continue;
                            }
                            let xv1 = f64::from(xv[xrow + (t - a) as usize]);
                            acc += f64::from(w[wrow + kk as usize]) * xv1;
                        }
                    }
                    *slot = acc as f32;
                }
            };
            run_rows(&mut out, n_out, fill, opts);
            Tensor::from_f32(vec![c_out, n_out], out).expect("conv output shape")
        }
        (TensorData::I8 { codes: w, quant: qw }, TensorData::I8 { codes: xv, quant: qx }) => {
            let oq = out_q.ok_or_else(|| ExecError::MissingOutQuant { layer: id.to_string() })?;
            let zw = qw.zero_point;
            let zx = qx.zero_point;
            let scale = qw.scale * qx.scale;
            let mut out = vec![0i8; c_out * n_out];
            let fill = |co: usize, row: &mut [i8]| {
                let wbase = co * c_in * (k as usize);
                for (oi, slot) in row.iter_mut().enumerate() {
                    let o = o_min + oi as i64;
                    let mut acc: i32 = 0;
                    for ci in 0..c_in {
                        let xrow = ci * n;
                        let wrow = wbase + ci * (k as usize);
                        for kk in 0..k {
                            let t = o * s - pl + d * kk;
                            let xq = if t < a || t > b {
                                zx
                            } else {
                                i32::from(xv[xrow + (t - a) as usize])
                            };
                            let wq = i32::from(w[wrow + kk as usize]);
                            acc += (xq - zx) * (wq - zw);
                        }
                    }
                    let real = f64::from(acc) * scale + f64::from(p.bias[co]);
                    *slot = oq.quantize_value(real);
                }
            };
            run_rows(&mut out, n_out, fill, opts);
            Tensor::from_i8(vec![c_out, n_out], out, oq).expect("conv output shape")
        }
        _ => return Err(ExecError::DtypeMismatch { layer: id.to_string() }),
    };
    Ok(WindowedValue { start: o_min, tensor })
}

fn dense_window(
    id: &str,
    p: &crate::graph::DenseParams,
    x: &WindowedValue,
    opts: ExecOptions,
) -> Result<WindowedValue, ExecError> {
    let n = x.cols();
    let quantized = p.weights.is_quantized();
    if n == 0 {
        return Ok(empty_like(p.out_features, if quantized { p.out_quant } else { None }));
    }
    let fi = p.in_features;
    let fo = p.out_features;
    let tensor = match (p.weights.data(), x.tensor.data()) {
        (TensorData::F32(w), TensorData::F32(xv)) => {
            let mut out = vec![0.0f32; fo * n];
            let fill = |o: usize, row: &mut [f32]| {
                for (t, slot) in row.iter_mut().enumerate() {
                    let mut acc = f64::from(p.bias[o]);
                    for i in 0..fi {
                        acc += f64::from(w[o * fi + i]) * f64::from(xv[i * n + t]);
                    }
                    *slot = acc as f32;
                }
            };
            run_rows(&mut out, n, fill, opts);
            Tensor::from_f32(vec![fo, n], out).expect("dense output shape")
        }
        (TensorData::I8 { codes: w, quant: qw }, TensorData::I8 { codes: xv, quant: qx }) => {
            let oq = p
                .out_quant
                .ok_or_else(|| ExecError::MissingOutQuant { layer: id.to_string() })?;
            let zw = qw.zero_point;
            let zx = qx.zero_point;
            let scale = qw.scale * qx.scale;
            let mut out = vec![0i8; fo * n];
            let fill = |o: usize, row: &mut [i8]| {
                for (t, slot) in row.iter_mut().enumerate() {
                    let mut acc: i32 = 0;
                    for i in 0..fi {
                        acc += (i32::from(xv[i * n + t]) - zx) * (i32::from(w[o * fi + i]) - zw);
                    }
                    let real = f64::from(acc) * scale + f64::from(p.bias[o]);
                    *slot = oq.quantize_value(real);
                }
            };
            run_rows(&mut out, n, fill, opts);
            Tensor::from_i8(vec![fo, n], out, oq).expect("dense output shape")
        }
        _ => return Err(ExecError::DtypeMismatch { layer: id.to_string() }),
    };
    Ok(WindowedValue { start: x.start, tensor })
}

fn run_rows<T: Send>(
    out: &mut [T],
    row_len: usize,
    fill: impl Fn(usize, &mut [T]) + Sync,
    opts: ExecOptions,
) {
    if row_len == 0 {
        return;
    }
    if opts.parallel {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(row, chunk)| fill(row, chunk));
    } else {
        for (row, chunk) in out.chunks_mut(row_len).enumerate() {
            fill(row, chunk);
        }
    }
}

fn batchnorm_window(
    id: &str,
    p: &crate::graph::BatchNormParams,
    x: &WindowedValue,
) -> Result<WindowedValue, ExecError> {
    let c = channels_of(x);
    let n = x.cols();
    let mut scale = vec![0.0f64; c];
    let mut offset = vec![0.0f64; c];
    for ch in 0..c {
        let denom = (f64::from(p.var[ch]) + p.eps).sqrt();
        scale[ch] = f64::from(p.gamma[ch]) / denom;
        offset[ch] = f64::from(p.beta[ch]) - f64::from(p.mean[ch]) * scale[ch];
    }
    let tensor = match x.tensor.data() {
        TensorData::F32(xv) => {
            let mut out = vec![0.0f32; c * n];
            for ch in 0..c {
                for t in 0..n {
                    out[ch * n + t] = (f64::from(xv[ch * n + t]) * scale[ch] + offset[ch]) as f32;
                }
            }
            Tensor::from_f32(vec![c, n], out).expect("bn output shape")
        }
        TensorData::I8 { codes, quant } => {
            let oq = p
                .out_quant
                .ok_or_else(|| ExecError::MissingOutQuant { layer: id.to_string() })?;
            let mut out = vec![0i8; c * n];
            for ch in 0..c {
                for t in 0..n {
                    let real = quant.dequantize_value(codes[ch * n + t]) * scale[ch] + offset[ch];
                    out[ch * n + t] = oq.quantize_value(real);
                }
            }
            Tensor::from_i8(vec![c, n], out, oq).expect("bn output shape")
        }
    };
    Ok(WindowedValue { start: x.start, tensor })
}

fn relu_window(x: &WindowedValue) -> WindowedValue {
    let tensor = match x.tensor.data() {
        TensorData::F32(xv) => {
            let out: Vec<f32> = xv.iter().map(|&v| v.max(0.0)).collect();
            Tensor::from_f32(x.tensor.shape().to_vec(), out).expect("relu shape")
        }
        TensorData::I8 { codes, quant } => {
            let zp = quant.zero_point as i8;
            let out: Vec<i8> = codes.iter().map(|&c| c.max(zp)).collect();
            Tensor::from_i8(x.tensor.shape().to_vec(), out, *quant).expect("relu shape")
        }
    };
    WindowedValue { start: x.start, tensor }
}

fn softmax_window(x: &WindowedValue) -> WindowedValue {
    let xf = x.tensor.dequantize();
    let v = xf.as_f32().expect("dequantized");
    let c = xf.shape()[0];
    let n = xf.shape()[1];
    let mut out = vec![0.0f32; c * n];
    for t in 0..n {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(f64::from(v[ch * n + t]));
        }
        let mut sum = 0.0f64;
        let mut e = vec![0.0f64; c];
        for ch in 0..c {
            e[ch] = (f64::from(v[ch * n + t]) - m).exp();
            sum += e[ch];
        }
        for ch in 0..c {
            out[ch * n + t] = (e[ch] / sum) as f32;
        }
    }
    WindowedValue {
        start: x.start,
        tensor: Tensor::from_f32(vec![c, n], out).expect("softmax shape"),
    }
}

fn upsample_window(x: &WindowedValue, factor: usize) -> WindowedValue {
    let c = channels_of(x);
    let n = x.cols();
    if n == 0 {
        return empty_like_of(x, c);
    }
    let u = factor as i64;
    let out_start = x.start * u;
    let n_out = n * factor;
    let tensor = match x.tensor.data() {
        TensorData::F32(xv) => {
            let mut out = vec![0.0f32; c * n_out];
            for ch in 0..c {
                for t in 0..n {
                    let v = xv[ch * n + t];
                    for j in 0..factor {
                        out[ch * n_out + t * factor + j] = v;
                    }
                }
            }
            Tensor::from_f32(vec![c, n_out], out).expect("upsample shape")
        }
        TensorData::I8 { codes, quant } => {
            let mut out = vec![0i8; c * n_out];
            for ch in 0..c {
                for t in 0..n {
                    let v = codes[ch * n + t];
                    for j in 0..factor {
                        out[ch * n_out + t * factor + j] = v;
                    }
                }
            }
            Tensor::from_i8(vec![c, n_out], out, *quant).expect("upsample shape")
        }
    };
    WindowedValue { start: out_start, tensor }
}

fn empty_like_of(x: &WindowedValue, channels: usize) -> WindowedValue {
    empty_like(channels, x.tensor.quant_params())
}

/// Intersection of input spans; `None` when empty.
fn intersect(ins: &[&WindowedValue]) -> Option<(i64, i64)> {
    let mut lo = i64::MIN;
    let mut hi = i64::MAX;
    for wv in ins {
        let end = wv.end()?;
        lo = lo.max(wv.start);
        hi = hi.min(end);
    }
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn slice_cols(t: &Tensor, from: usize, len: usize) -> Tensor {
    let c = t.shape()[0];
    let n = t.shape()[1];
    match t.data() {
        TensorData::F32(v) => {
            let mut out = Vec::with_capacity(c * len);
            for ch in 0..c {
                out.extend_from_slice(&v[ch * n + from..ch * n + from + len]);
            }
            Tensor::from_f32(vec![c, len], out).expect("slice shape")
        }
        TensorData::I8 { codes, quant } => {
            let mut out = Vec::with_capacity(c * len);
            for ch in 0..c {
                out.extend_from_slice(&codes[ch * n + from..ch * n + from + len]);
            }
            Tensor::from_i8(vec![c, len], out, *quant).expect("slice shape")
        }
    }
}

fn residual_window(
    id: &str,
    ins: &[&WindowedValue],
    out_quant: Option<QuantParams>,
) -> Result<WindowedValue, ExecError> {
    let c = channels_of(ins[0]);
    let quantized = ins[0].tensor.is_quantized();
    let Some((lo, hi)) = intersect(ins) else {
        return Ok(empty_like(c, if quantized { out_quant } else { None }));
    };
    let len = (hi - lo + 1) as usize;
    let slices: Vec<Tensor> = ins
        .iter()
        .map(|wv| slice_cols(&wv.tensor, (lo - wv.start) as usize, len))
        .collect();
    if quantized {
        let oq = out_quant.ok_or_else(|| ExecError::MissingOutQuant { layer: id.to_string() })?;
        let mut acc = vec![0.0f64; c * len];
        for s in &slices {
            let (codes, q) = s.as_i8().map_err(|e| ExecError::Internal(e.to_string()))?;
            for (a, &code) in acc.iter_mut().zip(codes.iter()) {
                *a += q.dequantize_value(code);
            }
        }
        let out: Vec<i8> = acc.iter().map(|&v| oq.quantize_value(v)).collect();
        Ok(WindowedValue {
            start: lo,
            tensor: Tensor::from_i8(vec![c, len], out, oq).expect("residual shape"),
        })
    } else {
        let mut acc = vec![0.0f64; c * len];
        for s in &slices {
            let v = s.as_f32().map_err(|e| ExecError::Internal(e.to_string()))?;
            for (a, &x) in acc.iter_mut().zip(v.iter()) {
                *a += f64::from(x);
            }
        }
        let out: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        Ok(WindowedValue {
            start: lo,
            tensor: Tensor::from_f32(vec![c, len], out).expect("residual shape"),
        })
    }
}

fn concat_window(
    id: &str,
    ins: &[&WindowedValue],
    out_quant: Option<QuantParams>,
) -> Result<WindowedValue, ExecError> {
    let c_total: usize = ins.iter().map(|wv| channels_of(wv)).sum();
    let quantized = ins[0].tensor.is_quantized();
    let Some((lo, hi)) = intersect(ins) else {
        return Ok(empty_like(c_total, if quantized { out_quant } else { None }));
    };
    let len = (hi - lo + 1) as usize;
    if quantized {
        let oq = out_quant.ok_or_else(|| ExecError::MissingOutQuant { layer: id.to_string() })?;
        let mut out: Vec<i8> = Vec::with_capacity(c_total * len);
        for wv in ins {
            let s = slice_cols(&wv.tensor, (lo - wv.start) as usize, len);
            let (codes, q) = s.as_i8().map_err(|e| ExecError::Internal(e.to_string()))?;
            if q == oq {
                out.extend_from_slice(codes);
            } else {
                out.extend(codes.iter().map(|&c| oq.quantize_value(q.dequantize_value(c))));
            }
        }
        Ok(WindowedValue {
            start: lo,
            tensor: Tensor::from_i8(vec![c_total, len], out, oq).expect("concat shape"),
        })
    } else {
        let mut out: Vec<f32> = Vec::with_capacity(c_total * len);
        for wv in ins {
            let s = slice_cols(&wv.tensor, (lo - wv.start) as usize, len);
            out.extend_from_slice(s.as_f32().map_err(|e| ExecError::Internal(e.to_string()))?);
        }
        Ok(WindowedValue {
            start: lo,
            tensor: Tensor::from_f32(vec![c_total, len], out).expect("concat shape"),
        })
    }
}

fn forward_static(
    g: &GraphSpec,
    input: &Tensor,
    opts: ExecOptions,
) -> Result<ForwardResult, ExecError> {
    let quant_mode = g.quant_mode()?;
    if input.shape() != g.input.shape.as_slice() {
        return Err(ExecError::ShapeMismatch(format!(
            "static input must be {:?}, got {:?}",
            g.input.shape,
            input.shape()
        )));
    }
    let input_val = prepare_input(g, input, quant_mode)?;

    let mut live = Liveness::new(g);
    let mut values: BTreeMap<&str, Tensor> = BTreeMap::new();
    live.alloc(input_val.payload_bytes());
    values.insert(INPUT_ID, input_val);

    for layer in &g.layers {
        let ins: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|i| values.get(i.as_str()).expect("validated producer"))
            .collect();
        let out = eval_static_layer(layer.id.as_str(), &layer.op, &ins, opts)?;
        live.alloc(out.payload_bytes());
        values.insert(layer.id.as_str(), out);
        for inp in &layer.inputs {
            if live.release(inp.as_str()) {
                if let Some(v) = values.remove(inp.as_str()) {
                    live.free(v.payload_bytes());
                }
            }
        }
    }
    let mut outputs = BTreeMap::new();
    for id in &g.outputs {
        let t = values
            .get(id.as_str())
            .ok_or_else(|| ExecError::Internal(format!("output {id:?} vanished")))?;
        outputs.insert(id.clone(), t.clone());
    }
    Ok(ForwardResult { outputs, stats: ExecStats { peak_live_bytes: live.peak } })
}

fn eval_static_layer(
    id: &str,
    op: &LayerOp,
    ins: &[&Tensor],
    opts: ExecOptions,
) -> Result<Tensor, ExecError> {
    match op {
        LayerOp::Conv2d(p) => conv2d_static(id, p, ins[0], opts),
        LayerOp::Batchnorm(p) => {
            let wv = WindowedValue { start: 0, tensor: flatten_to_2d(ins[0]) };
            let out = batchnorm_window(id, p, &wv)?;
            Ok(reshape_back(out.tensor, ins[0].shape()))
        }
        LayerOp::Relu => {
            let wv = WindowedValue { start: 0, tensor: flatten_to_2d(ins[0]) };
            let out = relu_window(&wv);
            Ok(reshape_back(out.tensor, ins[0].shape()))
        }
        LayerOp::ResidualAdd(rq) => {
            let shape = ins[0].shape().to_vec();
            let flat: Vec<WindowedValue> =
                ins.iter().map(|t| WindowedValue { start: 0, tensor: flatten_to_2d(t) }).collect();
            let refs: Vec<&WindowedValue> = flat.iter().collect();
            let out = residual_window(id, &refs, rq.out_quant)?;
            Ok(reshape_back(out.tensor, &shape))
        }
        LayerOp::ConcatChannels(rq) => {
            let h = ins[0].shape()[1];
            let w = ins[0].shape()[2];
            let flat: Vec<WindowedValue> =
                ins.iter().map(|t| WindowedValue { start: 0, tensor: flatten_to_2d(t) }).collect();
            let refs: Vec<&WindowedValue> = flat.iter().collect();
            let out = concat_window(id, &refs, rq.out_quant)?;
            let c: usize = ins.iter().map(|t| t.shape()[0]).sum();
            Ok(reshape_back(out.tensor, &[c, h, w]))
        }
        other => Err(ExecError::Internal(format!(
            "layer {id:?}: {} is not supported in a static graph",
            other.kind_name()
        ))),
    }
}

/// Views `[C, H, W]` as `[C, H*W]` for channelwise elementwise ops.
fn flatten_to_2d(t: &Tensor) -> Tensor {
    let c = t.shape()[0];
    let hw: usize = t.shape()[1..].iter().product();
    match t.data() {
        TensorData::F32(v) => Tensor::from_f32(vec![c, hw], v.clone()).expect("flatten"),
        TensorData::I8 { codes, quant } => {
            Tensor::from_i8(vec![c, hw], codes.clone(), *quant).expect("flatten")
        }
    }
}

fn reshape_back(t: Tensor, shape: &[usize]) -> Tensor {
    match t.data() {
        TensorData::F32(v) => Tensor::from_f32(shape.to_vec(), v.clone()).expect("reshape"),
        TensorData::I8 { codes, quant } => {
            Tensor::from_i8(shape.to_vec(), codes.clone(), *quant).expect("reshape")
        }
    }
}

fn conv2d_static(
    id: &str,
    p: &crate::graph::Conv2dParams,
    x: &Tensor,
    opts: ExecOptions,
) -> Result<Tensor, ExecError> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c_in != p.in_channels {
        return Err(ExecError::ShapeMismatch(format!(
            "layer {id:?}: input has {c_in} channels, conv declares {}",
            p.in_channels
        )));
    }
    let h_out = (h + p.pad_top + p.pad_bottom - p.kernel_h) / p.stride_h + 1;
    let w_out = (w + p.pad_left + p.pad_right - p.kernel_w) / p.stride_w + 1;
    let c_out = p.out_channels;
    let plane = h_out * w_out;

    match (p.weights.data(), x.data()) {
        (TensorData::F32(wt), TensorData::F32(xv)) => {
            let mut out = vec![0.0f32; c_out * plane];
            let fill = |co: usize, row: &mut [f32]| {
                let wbase = co * c_in * p.kernel_h * p.kernel_w;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = f64::from(p.bias[co]);
                        for ci in 0..c_in {
                            for ky in 0..p.kernel_h {
                                let iy = (oy * p.stride_h + ky) as i64 - p.pad_top as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..p.kernel_w {
                                    let ix = (ox * p.stride_w + kx) as i64 - p.pad_left as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let xi = xv[ci * h * w + iy as usize * w + ix as usize];
                                    let wi = wt[wbase
                                        + ci * p.kernel_h * p.kernel_w
                                        + ky * p.kernel_w
                                        + kx];
                                    acc += f64::from(wi) * f64::from(xi);
                                }
                            }
                        }
                        row[oy * w_out + ox] = acc as f32;
                    }
                }
            };
            run_rows(&mut out, plane, fill, opts);
            Ok(Tensor::from_f32(vec![c_out, h_out, w_out], out).expect("conv2d shape"))
        }
        (TensorData::I8 { codes: wt, quant: qw }, TensorData::I8 { codes: xv, quant: qx }) => {
            let oq = p
                .out_quant
                .ok_or_else(|| ExecError::MissingOutQuant { layer: id.to_string() })?;
            let zw = qw.zero_point;
            let zx = qx.zero_point;
            let scale = qw.scale * qx.scale;
            let mut out = vec![0i8; c_out * plane];
            let fill = |co: usize, row: &mut [i8]| {
                let wbase = co * c_in * p.kernel_h * p.kernel_w;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc: i32 = 0;
                        for ci in 0..c_in {
                            for ky in 0..p.kernel_h {
                                let iy = (oy * p.stride_h + ky) as i64 - p.pad_top as i64;
                                for kx in 0..p.kernel_w {
                                    let ix = (ox * p.stride_w + kx) as i64 - p.pad_left as i64;
                                    let xq = if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64
                                    {
                                        zx
                                    } else {
                                        i32::from(xv[ci * h * w + iy as usize * w + ix as usize])
                                    };
                                    let wq = i32::from(
                                        wt[wbase
                                            + ci * p.kernel_h * p.kernel_w
                                            + ky * p.kernel_w
                                            + kx],
                                    );
                                    acc += (xq - zx) * (wq - zw);
                                }
                            }
                        }
                        let real = f64::from(acc) * scale + f64::from(p.bias[co]);
                        row[oy * w_out + ox] = oq.quantize_value(real);
                    }
                }
            };
            run_rows(&mut out, plane, fill, opts);
            Ok(Tensor::from_i8(vec![c_out, h_out, w_out], out, oq).expect("conv2d shape"))
        }
        _ => Err(ExecError::DtypeMismatch { layer: id.to_string() }),
    }
}

/// Earliest input column of `op` that output column `next` can touch
/// (arithmetic, may be negative).
fn required_start(op: &LayerOp, next: i64) -> i64 {
    match op {
        LayerOp::Conv1d(p) => next * p.stride as i64 - p.pad_left as i64,
        LayerOp::NearestUpsample(p) => next.div_euclid(p.factor as i64),
        _ => next,
    }
}

/// Incremental executor for timewise graphs.
///
/// Columns are pushed in as they arrive; every layer advances as soon as its
/// dependencies exist, and finished output columns come back immediately.
/// Each element is computed by the same per-index arithmetic as the offline
/// pass, so the streamed columns are bitwise equal to offline inference over
/// the full sequence, for float and quantized graphs alike. Only the columns
/// still needed by downstream layers are retained, so memory stays bounded by
/// the graph's context rather than the sequence length.
pub struct StreamRunner {
    graph: std::sync::Arc<GraphSpec>,
    opts: ExecOptions,
    quant_mode: QuantMode,
    /// Producer id -> indices of consuming layers in `graph.layers`.
    consumers: BTreeMap<String, Vec<usize>>,
    /// Retained columns per producer (graph input included).
    bufs: BTreeMap<String, WindowedValue>,
    /// Next output column each layer has yet to compute.
    out_next: BTreeMap<String, i64>,
    /// Next column of each graph output not yet handed to the caller.
    ret_next: BTreeMap<String, i64>,
    input_next: i64,
    finished: bool,
    peak_retained: usize,
}

impl StreamRunner {
    pub fn new(g: &GraphSpec) -> Result<Self, ExecError> {
        let meta = g.validate()?;
        if meta.kind != GraphKind::Timewise {
            return Err(ExecError::BadWindow("streaming requires a timewise graph".into()));
        }
        let quant_mode = g.quant_mode()?;
        let mut consumers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        consumers.insert(INPUT_ID.to_string(), Vec::new());
        for (li, l) in g.layers.iter().enumerate() {
            consumers.entry(l.id.clone()).or_default();
            for i in &l.inputs {
                consumers.entry(i.clone()).or_default().push(li);
            }
        }
        let virgin = || WindowedValue {
            start: 0,
            tensor: Tensor::from_f32(vec![0, 0], vec![]).expect("empty buffer"),
        };
        let mut bufs = BTreeMap::new();
        let mut out_next = BTreeMap::new();
        bufs.insert(INPUT_ID.to_string(), virgin());
        for l in &g.layers {
            bufs.insert(l.id.clone(), virgin());
            out_next.insert(l.id.clone(), 0i64);
        }
        let ret_next = g.outputs.iter().map(|o| (o.clone(), 0i64)).collect();
        Ok(StreamRunner {
            graph: std::sync::Arc::new(g.clone()),
            opts: ExecOptions::default(),
            quant_mode,
            consumers,
            bufs,
            out_next,
            ret_next,
            input_next: 0,
            finished: false,
            peak_retained: 0,
        })
    }

    pub fn with_options(mut self, opts: ExecOptions) -> Self {
        self.opts = opts;
        self
    }

    /// High-water mark of retained column bytes across all layers.
    pub fn peak_retained_bytes(&self) -> usize {
        self.peak_retained
    }

    /// Absolute index of the next input column [`push`](Self::push) expects.
    pub fn input_position(&self) -> i64 {
        self.input_next
    }

    /// Feeds the next `[C, n]` span of input columns and returns the output
    /// columns that became final. `n = 0` is allowed.
    pub fn push(
        &mut self,
        cols: &Tensor,
    ) -> Result<BTreeMap<String, WindowedValue>, ExecError> {
        if self.finished {
            return Err(ExecError::BadWindow("stream already finished".into()));
        }
        if cols.shape().len() != 2 || cols.shape()[0] != self.graph.input.shape[0] {
            return Err(ExecError::ShapeMismatch(format!(
                "input span must be [{}, n], got {:?}",
                self.graph.input.shape[0],
                cols.shape()
            )));
        }
        let prepared = prepare_input(&self.graph, cols, self.quant_mode)?;
        let n = prepared.shape()[1] as i64;
        let incoming = WindowedValue { start: self.input_next, tensor: prepared };
        append_cols(self.bufs.get_mut(INPUT_ID).expect("input buffer"), &incoming)?;
        self.input_next += n;
        self.sweep(false)
    }

    /// Declares the end of the input sequence, applying right-edge padding,
    /// and returns the remaining output columns.
    pub fn finish(&mut self) -> Result<BTreeMap<String, WindowedValue>, ExecError> {
        if self.finished {
            return Err(ExecError::BadWindow("stream already finished".into()));
        }
        let out = self.sweep(true)?;
        self.finished = true;
        Ok(out)
    }

    fn sweep(
        &mut self,
        is_final: bool,
    ) -> Result<BTreeMap<String, WindowedValue>, ExecError> {
        let g = std::sync::Arc::clone(&self.graph);
        let layers = &g.layers;
        for layer in layers {
            let next = self.out_next[layer.id.as_str()];
            let mut slices: Vec<WindowedValue> = Vec::with_capacity(layer.inputs.len());
            for inp in &layer.inputs {
                slices.push(self.slice_for(inp, required_start(&layer.op, next).max(0))?);
            }
            let refs: Vec<&WindowedValue> = slices.iter().collect();
            let out =
                eval_timewise_layer(layer.id.as_str(), &layer.op, &refs, is_final, self.opts)?;
            let Some(end) = out.end() else { continue };
            if end < next {
                continue;
            }
            if out.start > next {
                return Err(ExecError::Internal(format!(
                    "layer {:?} produced a gap: have up to {next}, got start {}",
                    layer.id, out.start
                )));
            }
            let fresh = if out.start == next {
                out
            } else {
                let off = (next - out.start) as usize;
                WindowedValue {
                    start: next,
                    tensor: slice_cols(&out.tensor, off, out.cols() - off),
                }
            };
            append_cols(self.bufs.get_mut(layer.id.as_str()).expect("layer buffer"), &fresh)?;
            *self.out_next.get_mut(layer.id.as_str()).expect("layer cursor") = end + 1;
        }

        // Hand out freshly finished output columns.
        let mut returned = BTreeMap::new();
        for out_id in &g.outputs {
            let buf = &self.bufs[out_id.as_str()];
            let ret = self.ret_next[out_id.as_str()];
            let Some(end) = buf.end() else { continue };
            if end < ret {
                continue;
            }
            let off = (ret - buf.start) as usize;
            let fresh = WindowedValue {
                start: ret,
                tensor: slice_cols(&buf.tensor, off, (end - ret + 1) as usize),
            };
            returned.insert(out_id.clone(), fresh);
            *self.ret_next.get_mut(out_id.as_str()).expect("output cursor") = end + 1;
        }

        self.trim(layers);
        let retained: usize = self.bufs.values().map(|b| b.tensor.payload_bytes()).sum();
        self.peak_retained = self.peak_retained.max(retained);
        Ok(returned)
    }

    /// Slice of a producer's buffer from absolute column `lo` onward.
    fn slice_for(&self, id: &str, lo: i64) -> Result<WindowedValue, ExecError> {
        let buf = &self.bufs[id];
        let Some(end) = buf.end() else {
            return Ok(WindowedValue { start: lo, tensor: empty_cols_like(&buf.tensor) });
        };
        if buf.start > lo {
            return Err(ExecError::Internal(format!(
                "stream retention underflow on {id:?}: need column {lo}, kept from {}",
                buf.start
            )));
        }
        if end < lo {
            return Ok(WindowedValue { start: lo, tensor: empty_cols_like(&buf.tensor) });
        }
        let off = (lo - buf.start) as usize;
        Ok(WindowedValue { start: lo, tensor: slice_cols(&buf.tensor, off, (end - lo + 1) as usize) })
    }

    /// Drops buffered columns no future computation can read.
    fn trim(&mut self, layers: &[crate::graph::LayerSpec]) {
        let ids: Vec<String> = self.bufs.keys().cloned().collect();
        for id in ids {
            let mut needed = match self.ret_next.get(id.as_str()) {
                Some(&r) => r,
                None => match self.out_next.get(id.as_str()) {
                    Some(&n) => n,
                    None => self.input_next,
                },
            };
            if !self.consumers[id.as_str()].is_empty() {
                let internal = self.consumers[id.as_str()]
                    .iter()
                    .map(|&li| {
                        required_start(&layers[li].op, self.out_next[layers[li].id.as_str()])
                            .max(0)
                    })
                    .min()
                    .expect("nonempty consumer list");
                needed = needed.min(internal);
            }
            let buf = self.bufs.get_mut(id.as_str()).expect("buffer");
            let Some(end) = buf.end() else {
                buf.start = needed;
                continue;
            };
            if needed <= buf.start {
                continue;
            }
            if needed > end {
                *buf = WindowedValue { start: needed, tensor: empty_cols_like(&buf.tensor) };
            } else {
                let off = (needed - buf.start) as usize;
                *buf = WindowedValue {
                    start: needed,
                    tensor: slice_cols(&buf.tensor, off, (end - needed + 1) as usize),
                };
            }
        }
    }
}

/// `[C, 0]` tensor with the dtype and quantization of `t`.
fn empty_cols_like(t: &Tensor) -> Tensor {
    let c = t.shape().first().copied().unwrap_or(0);
    match t.data() {
        TensorData::F32(_) => Tensor::from_f32(vec![c, 0], vec![]).expect("empty"),
        TensorData::I8 { quant, .. } => {
            Tensor::from_i8(vec![c, 0], vec![], *quant).expect("empty")
        }
    }
}

/// Appends `new` to the right edge of `buf`, requiring contiguity.
fn append_cols(buf: &mut WindowedValue, new: &WindowedValue) -> Result<(), ExecError> {
    if new.cols() == 0 {
        return Ok(());
    }
    if buf.cols() == 0 {
        *buf = new.clone();
        return Ok(());
    }
    let end = buf.end().expect("nonempty buffer");
    if new.start != end + 1 {
        return Err(ExecError::Internal(format!(
            "discontiguous append: buffer ends at {end}, new span starts at {}",
            new.start
        )));
    }
    let joined = match (buf.tensor.data(), new.tensor.data()) {
        (TensorData::F32(a), TensorData::F32(b)) => {
            let c = buf.tensor.shape()[0];
            let (na, nb) = (buf.cols(), new.cols());
            let mut out = Vec::with_capacity(c * (na + nb));
            for ch in 0..c {
                out.extend_from_slice(&a[ch * na..(ch + 1) * na]);
                out.extend_from_slice(&b[ch * nb..(ch + 1) * nb]);
            }
            Tensor::from_f32(vec![c, na + nb], out).expect("append shape")
        }
        (TensorData::I8 { codes: a, quant: qa }, TensorData::I8 { codes: b, quant: qb }) => {
            if qa != qb {
                return Err(ExecError::Internal(
                    "quantization drifted between spans of one layer".into(),
                ));
            }
            let c = buf.tensor.shape()[0];
            let (na, nb) = (buf.cols(), new.cols());
            let mut out = Vec::with_capacity(c * (na + nb));
            for ch in 0..c {
                out.extend_from_slice(&a[ch * na..(ch + 1) * na]);
                out.extend_from_slice(&b[ch * nb..(ch + 1) * nb]);
            }
            Tensor::from_i8(vec![c, na + nb], out, *qa).expect("append shape")
        }
        _ => {
            return Err(ExecError::Internal(
                "dtype drifted between spans of one layer".into(),
            ))
        }
    };
    *buf = WindowedValue { start: buf.start, tensor: joined };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        BatchNormParams, Conv1dParams, InputSpec, LayerSpec, RequantParams, UpsampleParams,
    };
    use rand::Rng;

    fn conv_layer(
        id: &str,
        input: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pl: usize,
        pr: usize,
        rng: &mut impl Rng,
    ) -> LayerSpec {
        let n = cout * cin * k;
        let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect();
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            op: LayerOp::Conv1d(Conv1dParams {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                dilation,
                pad_left: pl,
                pad_right: pr,
                weights: Tensor::from_f32(vec![cout, cin, k], w).unwrap(),
                bias: b,
                out_quant: None,
            }),
        }
    }

    fn rand_input(c: usize, t: usize, rng: &mut impl Rng) -> Tensor {
        let v: Vec<f32> = (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f32(vec![c, t], v).unwrap()
    }

    /// Offline conv against a direct padded-buffer reference.
    #[test]
    fn conv1d_matches_padded_reference() {
        let mut rng = crate::rng::rng_for_seed(11);
        for &(k, s, d, pl, pr) in
            &[(3usize, 1usize, 1usize, 1usize, 1usize), (5, 2, 1, 3, 2), (3, 1, 2, 4, 0), (1, 1, 1, 0, 0), (4, 3, 2, 5, 6)]
        {
            let g = GraphSpec {
                input: InputSpec { shape: vec![2, 0], time_axis: Some(1), quant: None },
                layers: vec![conv_layer("c", INPUT_ID, 2, 3, k, s, d, pl, pr, &mut rng)],
                outputs: vec!["c".into()],
            };
            let t_in = 17;
            let x = rand_input(2, t_in, &mut rng);
            let got = graph_forward(&g, &x, ExecOptions::default()).unwrap();
            let out = &got.outputs["c"];

            // Reference: explicit zero-padded buffer.
            let xv = x.as_f32().unwrap();
            let padded_len = t_in + pl + pr;
            let mut padded = vec![vec![0.0f64; padded_len]; 2];
            for ci in 0..2 {
                for t in 0..t_in {
                    padded[ci][pl + t] = f64::from(xv[ci * t_in + t]);
                }
            }
            let span = d * (k - 1);
            let n_out = if padded_len >= span + 1 { (padded_len - span - 1) / s + 1 } else { 0 };
            assert_eq!(out.shape(), &[3, n_out], "k={k} s={s} d={d} pl={pl} pr={pr}");
            let (w, b) = match &g.layers[0].op {
                LayerOp::Conv1d(p) => (p.weights.as_f32().unwrap().to_vec(), p.bias.clone()),
                _ => unreachable!(),
            };
            let ov = out.as_f32().unwrap();
            for co in 0..3 {
                for o in 0..n_out {
                    let mut acc = f64::from(b[co]);
                    for ci in 0..2 {
                        for kk in 0..k {
                            acc += f64::from(w[co * 2 * k + ci * k + kk]) * padded[ci][o * s + d * kk];
                        }
                    }
                    let want = acc as f32;
                    assert_eq!(ov[co * n_out + o], want);
                }
            }
        }
    }

    #[test]
    fn parallel_execution_is_bitwise_identical() {
        let mut rng = crate::rng::rng_for_seed(5);
        let g = GraphSpec {
            input: InputSpec { shape: vec![3, 0], time_axis: Some(1), quant: None },
            layers: vec![
                conv_layer("c1", INPUT_ID, 3, 8, 5, 1, 1, 2, 2, &mut rng),
                conv_layer("c2", "c1", 8, 4, 3, 1, 1, 1, 1, &mut rng),
            ],
            outputs: vec!["c2".into()],
        };
        let x = rand_input(3, 40, &mut rng);
        let serial = graph_forward(&g, &x, ExecOptions { parallel: false }).unwrap();
        for threads in [1usize, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let par = pool
                .install(|| graph_forward(&g, &x, ExecOptions { parallel: true }))
                .unwrap();
            assert_eq!(
                serial.outputs["c2"].as_f32().unwrap(),
                par.outputs["c2"].as_f32().unwrap(),
                "threads={threads}"
            );
        }
    }

    #[test]
    fn windowed_interior_needs_no_padding_and_matches_offline() {
        let mut rng = crate::rng::rng_for_seed(6);
        let g = GraphSpec {
            input: InputSpec { shape: vec![2, 0], time_axis: Some(1), quant: None },
            layers: vec![conv_layer("c", INPUT_ID, 2, 2, 3, 1, 1, 1, 1, &mut rng)],
            outputs: vec!["c".into()],
        };
        let t = 30;
        let x = rand_input(2, t, &mut rng);
        let full = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let fv = full.outputs["c"].as_f32().unwrap().to_vec();
        let n_full = full.outputs["c"].shape()[1];

        // Interior span [5, 20): no edges, outputs must match offline exactly.
        let sub = slice_cols(&x, 5, 15);
        let win = forward_windowed(&g, &sub, 5, false, ExecOptions::default()).unwrap();
        let wv = &win.outputs["c"];
        assert!(wv.cols() > 0);
        let ov = wv.tensor.as_f32().unwrap();
        for ch in 0..2 {
            for (i, &val) in ov[ch * wv.cols()..(ch + 1) * wv.cols()].iter().enumerate() {
                let abs = wv.start as usize + i;
                assert!(abs < n_full);
                assert_eq!(val, fv[ch * n_full + abs]);
            }
        }
    }

    #[test]
    fn upsample_residual_concat_windows() {
        let mut rng = crate::rng::rng_for_seed(7);
        let mut g = GraphSpec {
            input: InputSpec { shape: vec![2, 0], time_axis: Some(1), quant: None },
            layers: vec![
                conv_layer("a", INPUT_ID, 2, 2, 3, 1, 1, 1, 1, &mut rng),
                conv_layer("b", INPUT_ID, 2, 2, 5, 1, 1, 2, 2, &mut rng),
            ],
            outputs: vec![],
        };
        g.layers.push(LayerSpec {
            id: "sum".into(),
            inputs: vec!["a".into(), "b".into()],
            op: LayerOp::ResidualAdd(RequantParams { out_quant: None }),
        });
        g.layers.push(LayerSpec {
            id: "cat".into(),
            inputs: vec!["a".into(), "sum".into()],
            op: LayerOp::ConcatChannels(RequantParams { out_quant: None }),
        });
        g.layers.push(LayerSpec {
            id: "up".into(),
            inputs: vec!["cat".into()],
            op: LayerOp::NearestUpsample(UpsampleParams { factor: 3 }),
        });
        g.outputs = vec!["up".into()];
        let x = rand_input(2, 12, &mut rng);
        let r = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let out = &r.outputs["up"];
        assert_eq!(out.shape(), &[4, 36]);
        let v = out.as_f32().unwrap();
        // Nearest upsample repeats each source column three times.
        for ch in 0..4 {
            for t in 0..12 {
                let base = v[ch * 36 + t * 3];
                assert_eq!(v[ch * 36 + t * 3 + 1], base);
                assert_eq!(v[ch * 36 + t * 3 + 2], base);
            }
        }
    }

    #[test]
    fn batchnorm_window_matches_formula() {
        let p = BatchNormParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![0.5],
            var: vec![3.0],
            eps: 1.0,
            out_quant: None,
        };
        let x = WindowedValue {
            start: 0,
            tensor: Tensor::from_f32(vec![1, 3], vec![0.5, 1.5, -0.5]).unwrap(),
        };
        let y = batchnorm_window("bn", &p, &x).unwrap();
        let v = y.tensor.as_f32().unwrap();
        assert!((v[0] - 1.0).abs() < 1e-7);
        assert!((v[1] - 2.0).abs() < 1e-7);
        assert!((v[2] - 0.0).abs() < 1e-7);
    }

    #[test]
    fn quantized_conv_uses_zero_point_padding() {
        // One input channel, kernel 3, pad 1: with an asymmetric zero point
        // the edge outputs must treat the padding as the real value 0.
        let wq = QuantParams::new(1.0, 0).unwrap();
        let weights = Tensor::from_i8(vec![1, 1, 3], vec![1, 1, 1], wq).unwrap();
        let oq = QuantParams::new(0.5, 0).unwrap();
        let g = GraphSpec {
            input: InputSpec {
                shape: vec![1, 0],
                time_axis: Some(1),
                quant: Some(QuantParams::new(0.5, -10).unwrap()),
            },
            layers: vec![LayerSpec {
                id: "c".into(),
                inputs: vec![INPUT_ID.into()],
                op: LayerOp::Conv1d(Conv1dParams {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 3,
                    stride: 1,
                    dilation: 1,
                    pad_left: 1,
                    pad_right: 1,
                    weights,
                    bias: vec![0.0],
                    out_quant: Some(oq),
                }),
            }],
            outputs: vec!["c".into()],
        };
        // Real values 1.0, 2.0, 3.0 under scale 0.5 zp -10: codes -8, -6, -4.
        let x = Tensor::from_f32(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let (codes, q) = r.outputs["c"].as_i8().unwrap();
        let vals: Vec<f64> = codes.iter().map(|&c| q.dequantize_value(c)).collect();
        // Sums with zero padding: 3.0, 6.0, 5.0.
        assert_eq!(vals, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn peak_live_bytes_is_tracked() {
        let mut rng = crate::rng::rng_for_seed(8);
        let g = GraphSpec {
            input: InputSpec { shape: vec![2, 0], time_axis: Some(1), quant: None },
            layers: vec![
                conv_layer("c1", INPUT_ID, 2, 16, 3, 1, 1, 1, 1, &mut rng),
                conv_layer("c2", "c1", 16, 2, 3, 1, 1, 1, 1, &mut rng),
            ],
            outputs: vec!["c2".into()],
        };
        let x = rand_input(2, 50, &mut rng);
        let r = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        // Peak must at least cover input + the 16-channel intermediate.
        assert!(r.stats.peak_live_bytes >= (2 * 50 + 16 * 50) * 4);
    }

    #[test]
    fn zero_length_input_yields_zero_length_outputs() {
        let mut rng = crate::rng::rng_for_seed(9);
        let g = GraphSpec {
            input: InputSpec { shape: vec![2, 0], time_axis: Some(1), quant: None },
            layers: vec![conv_layer("c", INPUT_ID, 2, 3, 3, 1, 1, 1, 1, &mut rng)],
            outputs: vec!["c".into()],
        };
        let x = Tensor::from_f32(vec![2, 0], vec![]).unwrap();
        let r = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        assert_eq!(r.outputs["c"].shape()[1], 0);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = crate::rng::rng_for_seed(10);
        let mut g = GraphSpec {
            input: InputSpec { shape: vec![3, 0], time_axis: Some(1), quant: None },
            layers: vec![conv_layer("c", INPUT_ID, 3, 5, 1, 1, 1, 0, 0, &mut rng)],
            outputs: vec![],
        };
        g.layers.push(LayerSpec {
            id: "sm".into(),
            inputs: vec!["c".into()],
            op: LayerOp::Softmax,
        });
        g.outputs = vec!["sm".into()];
        let x = rand_input(3, 7, &mut rng);
        let r = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let out = &r.outputs["sm"];
        let v = out.as_f32().unwrap();
        for t in 0..7 {
            let s: f64 = (0..5).map(|c| f64::from(v[c * 7 + t])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    /// Multi-path graph: two conv branches, concat, residual-free tail.
    fn branchy_graph(rng: &mut impl Rng) -> GraphSpec {
        GraphSpec {
            input: InputSpec { shape: vec![3, 0], time_axis: Some(1), quant: None },
            layers: vec![
                conv_layer("a1", INPUT_ID, 3, 4, 3, 1, 1, 1, 1, rng),
                conv_layer("a2", "a1", 4, 4, 3, 1, 1, 2, 0, rng),
                conv_layer("b1", INPUT_ID, 3, 4, 7, 1, 1, 4, 2, rng),
                LayerSpec {
                    id: "cat".into(),
                    inputs: vec!["a2".into(), "b1".into()],
                    op: LayerOp::ConcatChannels(RequantParams { out_quant: None }),
                },
                conv_layer("mix", "cat", 8, 4, 1, 1, 1, 0, 0, rng),
                LayerSpec {
                    id: "res".into(),
                    inputs: vec!["mix".into(), "a2".into()],
                    op: LayerOp::ResidualAdd(RequantParams { out_quant: None }),
                },
            ],
            outputs: vec!["res".into()],
        }
    }

    fn stream_in_chunks(
        g: &GraphSpec,
        x: &Tensor,
        chunk: usize,
    ) -> (WindowedValue, usize) {
        let out_id = g.outputs[0].clone();
        let mut runner = StreamRunner::new(g).unwrap();
        let mut got: Option<WindowedValue> = None;
        let t = x.shape()[1];
        let mut fed = 0;
        while fed < t {
            let n = chunk.min(t - fed);
            let part = slice_cols(x, fed, n);
            fed += n;
            let outs = runner.push(&part).unwrap();
            if let Some(w) = outs.get(&out_id) {
                match &mut got {
                    None => got = Some(w.clone()),
                    Some(acc) => append_cols(acc, w).unwrap(),
                }
            }
        }
        let outs = runner.finish().unwrap();
        if let Some(w) = outs.get(&out_id) {
            match &mut got {
                None => got = Some(w.clone()),
                Some(acc) => append_cols(acc, w).unwrap(),
            }
        }
        (got.expect("some output"), runner.peak_retained_bytes())
    }

    #[test]
    fn streaming_is_bitwise_equal_to_offline_float() {
        let mut rng = crate::rng::rng_for_seed(21);
        let g = branchy_graph(&mut rng);
        let t = 37;
        let x = rand_input(3, t, &mut rng);
        let offline = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let want = offline.outputs["res"].as_f32().unwrap().to_vec();
        for chunk in [1usize, 5, t] {
            let (got, _) = stream_in_chunks(&g, &x, chunk);
            assert_eq!(got.start, 0, "chunk={chunk}");
            assert_eq!(got.tensor.as_f32().unwrap(), &want[..], "chunk={chunk}");
        }
    }

    #[test]
    fn streaming_handles_stride_and_upsample() {
        let mut rng = crate::rng::rng_for_seed(22);
        let g = GraphSpec {
            input: InputSpec { shape: vec![2, 0], time_axis: Some(1), quant: None },
            layers: vec![
                conv_layer("down", INPUT_ID, 2, 4, 5, 2, 1, 2, 2, &mut rng),
                LayerSpec {
                    id: "up".into(),
                    inputs: vec!["down".into()],
                    op: LayerOp::NearestUpsample(UpsampleParams { factor: 3 }),
                },
                conv_layer("out", "up", 4, 2, 3, 1, 1, 1, 1, &mut rng),
            ],
            outputs: vec!["out".into()],
        };
        let t = 41;
        let x = rand_input(2, t, &mut rng);
        let offline = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let want = offline.outputs["out"].as_f32().unwrap().to_vec();
        for chunk in [1usize, 4, t] {
            let (got, _) = stream_in_chunks(&g, &x, chunk);
            assert_eq!(got.start, 0);
            assert_eq!(got.tensor.as_f32().unwrap(), &want[..], "chunk={chunk}");
        }
    }

    #[test]
    fn streaming_is_bitwise_equal_to_offline_quantized() {
        let mut rng = crate::rng::rng_for_seed(23);
        let wq = QuantParams::new(0.02, 0).unwrap();
        let aq = QuantParams::new(0.05, 3).unwrap();
        let quant_conv = |id: &str, input: &str, cin: usize, cout: usize, k: usize,
                          pl: usize, pr: usize, rng: &mut dyn rand::RngCore|
         -> LayerSpec {
            let n = cout * cin * k;
            let w: Vec<i8> = (0..n).map(|_| rng.gen_range(-90i32..=90) as i8).collect();
            let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.05f32..0.05)).collect();
            LayerSpec {
                id: id.into(),
                inputs: vec![input.into()],
                op: LayerOp::Conv1d(Conv1dParams {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                    stride: 1,
                    dilation: 1,
                    pad_left: pl,
                    pad_right: pr,
                    weights: Tensor::from_i8(vec![cout, cin, k], w, wq).unwrap(),
                    bias: b,
                    out_quant: Some(aq),
                }),
            }
        };
        let g = GraphSpec {
            input: InputSpec {
                shape: vec![2, 0],
                time_axis: Some(1),
                quant: Some(QuantParams::new(1.0 / 64.0, 0).unwrap()),
            },
            layers: vec![
                quant_conv("c1", INPUT_ID, 2, 4, 5, 3, 1, &mut rng),
                quant_conv("c2", "c1", 4, 4, 3, 1, 1, &mut rng),
                LayerSpec {
                    id: "res".into(),
                    inputs: vec!["c1".into(), "c2".into()],
                    op: LayerOp::ResidualAdd(RequantParams { out_quant: Some(aq) }),
                },
            ],
            outputs: vec!["res".into()],
        };
        let t = 29;
        let x = rand_input(2, t, &mut rng);
        let offline = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let (want, wq2) = offline.outputs["res"].as_i8().unwrap();
        let want = want.to_vec();
        for chunk in [1usize, 7, t] {
            let (got, _) = stream_in_chunks(&g, &x, chunk);
            let (codes, q) = got.tensor.as_i8().unwrap();
            assert_eq!(q, wq2);
            assert_eq!(got.start, 0);
            assert_eq!(codes, &want[..], "chunk={chunk}");
        }
    }

    #[test]
    fn streaming_memory_stays_bounded_by_context() {
        let mut rng = crate::rng::rng_for_seed(24);
        let g = branchy_graph(&mut rng);
        let t = 600;
        let x = rand_input(3, t, &mut rng);
        let offline = graph_forward(&g, &x, ExecOptions::default()).unwrap();
        let (got, peak) = stream_in_chunks(&g, &x, 1);
        assert_eq!(
            got.tensor.as_f32().unwrap(),
            offline.outputs["res"].as_f32().unwrap()
        );
        // The streamed high-water mark must not scale with sequence length:
        // the whole-input buffer alone is 3 * 600 floats.
        assert!(
            peak * 4 < offline.stats.peak_live_bytes,
            "peak retained {peak} vs offline {}",
            offline.stats.peak_live_bytes
        );
    }

    #[test]
    fn push_after_finish_is_rejected() {
        let mut rng = crate::rng::rng_for_seed(25);
        let g = branchy_graph(&mut rng);
        let mut runner = StreamRunner::new(&g).unwrap();
        let x = rand_input(3, 4, &mut rng);
        runner.push(&x).unwrap();
        runner.finish().unwrap();
        assert!(matches!(runner.push(&x), Err(ExecError::BadWindow(_))));
        assert!(matches!(runner.finish(), Err(ExecError::BadWindow(_))));
    }
}
