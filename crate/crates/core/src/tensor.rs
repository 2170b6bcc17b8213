//! Dense tensors in float32 or 8-bit affine-quantized form.
//!
//! Quantized tensors store `i8` codes plus per-tensor [`QuantParams`]; the
//! represented value of a code `q` is `(q - zero_point) * scale`. Conversions
//! round half away from zero and saturate to the `i8` range.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    LengthMismatch { shape: Vec<usize>, expected: usize, got: usize },
    #[error("invalid quantization parameters: {0}")]
    InvalidQuantParams(String),
    #[error("tensor is not float32")]
    NotFloat,
    #[error("tensor is not int8-affine")]
    NotQuantized,
    #[error("bad tensor encoding: {0}")]
    BadEncoding(String),
}

/// Rounds to the nearest integer with ties going away from zero.
///
/// A value whose fractional part falls within `1e-9` of exactly one half is
/// treated as a tie. This absorbs representation error in quotients such as
/// `0.25 / 0.1`, which is slightly below `2.5` in binary floating point but
/// denotes an exact tie on the quantizer grid.
pub fn round_half_away(x: f64) -> f64 {
    const TIE_EPS: f64 = 1e-9;
    let a = x.abs();
    let floor = a.floor();
    let rounded = if a - floor >= 0.5 - TIE_EPS { floor + 1.0 } else { floor };
    if x < 0.0 {
        -rounded
    } else {
        rounded
    }
}

/// Per-tensor affine quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32) -> Result<Self, TensorError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(TensorError::InvalidQuantParams(format!(
                "scale must be finite and positive, got {scale}"
            )));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(TensorError::InvalidQuantParams(format!(
                "zero point must lie in [-128, 127], got {zero_point}"
            )));
        }
        Ok(Self { scale, zero_point })
    }

    /// Quantizes one real value to an `i8` code.
    pub fn quantize_value(&self, x: f64) -> i8 {
        let q = round_half_away(x / self.scale) + f64::from(self.zero_point);
        q.clamp(-128.0, 127.0) as i8
    }

    /// Real value represented by a code.
    pub fn dequantize_value(&self, code: i8) -> f64 {
        (i32::from(code) - self.zero_point) as f64 * self.scale
    }

    /// Smallest and largest representable values.
    pub fn representable_range(&self) -> (f64, f64) {
        (self.dequantize_value(-128), self.dequantize_value(127))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8 { codes: Vec<i8>, quant: QuantParams },
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch { shape, expected: n, got: data.len() });
        }
        Ok(Self { shape, data: TensorData::F32(data) })
    }

    pub fn from_i8(shape: Vec<usize>, codes: Vec<i8>, quant: QuantParams) -> Result<Self, TensorError> {
        QuantParams::new(quant.scale, quant.zero_point)?;
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(TensorError::LengthMismatch { shape, expected: n, got: codes.len() });
        }
        Ok(Self { shape, data: TensorData::I8 { codes, quant } })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: TensorData::F32(vec![0.0; n]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.data, TensorData::I8 { .. })
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I8 { .. } => Err(TensorError::NotFloat),
        }
    }

    pub fn as_i8(&self) -> Result<(&[i8], QuantParams), TensorError> {
        match &self.data {
            TensorData::F32(_) => Err(TensorError::NotQuantized),
            TensorData::I8 { codes, quant } => Ok((codes, *quant)),
        }
    }

    pub fn quant_params(&self) -> Option<QuantParams> {
        match &self.data {
            TensorData::F32(_) => None,
            TensorData::I8 { quant, .. } => Some(*quant),
        }
    }

    /// Bytes occupied by the element payload.
    pub fn payload_bytes(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::I8 { codes, .. } => codes.len(),
        }
    }

    /// Quantizes a float tensor to `i8` codes under `quant`. Quantizing an
    /// already-quantized tensor requantizes via its represented real values.
    pub fn quantize(&self, quant: QuantParams) -> Result<Tensor, TensorError> {
        QuantParams::new(quant.scale, quant.zero_point)?;
        let codes: Vec<i8> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| quant.quantize_value(f64::from(x))).collect(),
            TensorData::I8 { codes, quant: q0 } => codes
                .iter()
                .map(|&c| quant.quantize_value(q0.dequantize_value(c)))
                .collect(),
        };
        Ok(Tensor { shape: self.shape.clone(), data: TensorData::I8 { codes, quant } })
    }

    /// Converts to float32. Float tensors are returned unchanged.
    pub fn dequantize(&self) -> Tensor {
        match &self.data {
            TensorData::F32(_) => self.clone(),
            TensorData::I8 { codes, quant } => {
                let v: Vec<f32> = codes.iter().map(|&c| quant.dequantize_value(c) as f32).collect();
                Tensor { shape: self.shape.clone(), data: TensorData::F32(v) }
            }
        }
    }

    /// Largest absolute represented value.
    pub fn max_abs(&self) -> f64 {
        match &self.data {
            TensorData::F32(v) => v.iter().fold(0.0f64, |m, &x| m.max(f64::from(x).abs())),
            TensorData::I8 { codes, quant } => codes
                .iter()
                .fold(0.0f64, |m, &c| m.max(quant.dequantize_value(c).abs())),
        }
    }
}

/// Wire form used by the JSON model format: shape, dtype tag, base64
/// little-endian payload, and quantization parameters for `int8-affine`.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    dtype: String,
    data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = match &self.data {
            TensorData::F32(v) => {
                let mut bytes = Vec::with_capacity(v.len() * 4);
                for x in v {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
                TensorRepr {
                    shape: self.shape.clone(),
                    dtype: "float32".to_string(),
                    data: B64.encode(&bytes),
                    quant: None,
                }
            }
            TensorData::I8 { codes, quant } => {
                let bytes: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
                TensorRepr {
                    shape: self.shape.clone(),
                    dtype: "int8-affine".to_string(),
                    data: B64.encode(&bytes),
                    quant: Some(*quant),
                }
            }
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = TensorRepr::deserialize(d)?;
        let bytes = B64
            .decode(repr.data.as_bytes())
            .map_err(|e| D::Error::custom(format!("bad base64 tensor payload: {e}")))?;
        let n: usize = repr.shape.iter().product();
        match repr.dtype.as_str() {
            "float32" => {
                if bytes.len() != n * 4 {
                    return Err(D::Error::custom(format!(
                        "float32 payload of {} bytes does not match shape {:?}",
                        bytes.len(),
                        repr.shape
                    )));
                }
                let v: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_f32(repr.shape, v).map_err(D::Error::custom)
            }
            "int8-affine" => {
                if bytes.len() != n {
                    return Err(D::Error::custom(format!(
                        "int8 payload of {} bytes does not match shape {:?}",
                        bytes.len(),
                        repr.shape
                    )));
                }
                let quant = repr
                    .quant
                    .ok_or_else(|| D::Error::custom("int8-affine tensor is missing quant params"))?;
                let codes: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
                Tensor::from_i8(repr.shape, codes, quant).map_err(D::Error::custom)
            }
            other => Err(D::Error::custom(format!("unknown tensor dtype {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_half_away_basics() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(2.4), 2.0);
        assert_eq!(round_half_away(-2.4), -2.0);
        assert_eq!(round_half_away(2.6), 3.0);
        assert_eq!(round_half_away(0.0), 0.0);
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(-0.5), -1.0);
    }

    #[test]
    fn round_half_away_absorbs_quotient_representation_error() {
        // 0.25 / 0.1 is 2.4999999999999996 in f64 but denotes the grid tie 2.5.
        assert_eq!(round_half_away(0.25 / 0.1), 3.0);
        assert_eq!(round_half_away(-0.25 / 0.1), -3.0);
        // A genuinely-below-half value is unaffected.
        assert_eq!(round_half_away(2.499_999_9), 2.0);
    }

    #[test]
    fn quantize_examples() {
        let q = QuantParams::new(0.1, 0).unwrap();
        assert_eq!(q.quantize_value(0.25), 3);
        assert_eq!(q.quantize_value(-0.25), -3);
        assert_eq!(q.quantize_value(1000.0), 127);
        assert_eq!(q.quantize_value(-1000.0), -128);
        let q2 = QuantParams::new(0.5, 10).unwrap();
        assert_eq!(q2.quantize_value(1.0), 12);
        assert_eq!(q2.dequantize_value(12), 1.0);
    }

    #[test]
    fn quantize_rejects_bad_params() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(-1.0, 0).is_err());
        assert!(QuantParams::new(f64::NAN, 0).is_err());
        assert!(QuantParams::new(1.0, 128).is_err());
        assert!(QuantParams::new(1.0, -129).is_err());
        assert!(QuantParams::new(1.0, 127).is_ok());
    }

    #[test]
    fn roundtrip_error_bound() {
        // For in-range values, |dequantize(quantize(x)) - x| <= scale / 2.
        let q = QuantParams::new(0.03, -7).unwrap();
        let (lo, hi) = q.representable_range();
        let mut x = lo;
        while x <= hi {
            let err = (q.dequantize_value(q.quantize_value(x)) - x).abs();
            assert!(err <= q.scale / 2.0 + 1e-12, "x={x} err={err}");
            x += 0.001;
        }
    }

    #[test]
    fn tensor_json_roundtrip_f32() {
        let t = Tensor::from_f32(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 5.5, -0.125]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_json_roundtrip_i8() {
        let q = QuantParams::new(0.02, 3).unwrap();
        let t = Tensor::from_i8(vec![4], vec![-128, -1, 0, 127], q).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("int8-affine"));
        let back: Tensor = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_json_rejects_mismatched_payload() {
        let t = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let wrong = s.replace("[3]", "[4]");
        assert!(serde_json::from_str::<Tensor>(&wrong).is_err());
    }

    #[test]
    fn quantize_dequantize_tensor() {
        let q = QuantParams::new(0.1, 0).unwrap();
        let t = Tensor::from_f32(vec![3], vec![0.25, -0.25, 0.1]).unwrap();
        let qt = t.quantize(q).unwrap();
        let (codes, _) = qt.as_i8().unwrap();
        assert_eq!(codes, &[3, -3, 1]);
        let back = qt.dequantize();
        let v = back.as_f32().unwrap();
        assert!((v[0] - 0.3).abs() < 1e-6);
    }
}
