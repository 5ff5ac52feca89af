//! Dyadic integer-only quantization: scale calibration, 8-bit quantization,
//! and the multiply-shift requantization applied after every layer.
//!
//! A real rescale factor `S = S_w*S_x/S_y` is approximated as `m / 2^n` so
//! that requantizing an int32 accumulator needs one integer multiply, one
//! add, and one arithmetic shift.

use crate::error::{Error, Result};
use crate::model::{
    Activation, Layer, LayerKind, LayerWeights, Model, ModelBlock, PrecisionMode, ResidualAdd,
    relu6_clamp,
};
use crate::tensor::SparseTensor;

/// Dyadic rescale pair approximating a real scale ratio.
#[derive(Debug, Clone, Copy)]
pub struct QuantParams {
    /// Positive integer multiplier, < 2^31.
    pub m: u32,
    /// Shift amount, 0..=31.
    pub n: u8,
    /// The real ratio this pair approximates. Not part of the requantizer's
    /// identity: deserialized params carry `m / 2^n` here.
    pub s_real: f64,
}

impl PartialEq for QuantParams {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m && self.n == other.n
    }
}

/// Maximum relative error tolerated between `s_real` and `m / 2^n`.
pub const DYADIC_REL_TOL: f64 = 1.0 / 16384.0; // 2^-14

impl QuantParams {
    /// Reconstruct from serialized (m, n); `s_real` becomes exactly `m / 2^n`.
    pub fn from_raw(m: u32, n: u8) -> Result<Self> {
        if m == 0 || m >= 1 << 31 {
            return Err(Error::container(format!("quant multiplier {m} out of range")));
        }
        if n > 31 {
            return Err(Error::container(format!("quant shift {n} out of range")));
        }
        Ok(QuantParams {
            m,
            n,
            s_real: m as f64 / (1u64 << n) as f64,
        })
    }

    /// The dyadic value `m / 2^n` actually applied by [`requantize`].
    pub fn dyadic_value(&self) -> f64 {
        self.m as f64 / (1u64 << self.n) as f64
    }

    pub fn relative_error(&self) -> f64 {
        (self.s_real - self.dyadic_value()).abs() / self.s_real
    }
}

/// Per-tensor quantization metadata: symmetric int8, zero point pinned to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantTensorMeta {
    pub scale: f64,
    pub zero_point: i8,
    pub bits: u8,
}

impl QuantTensorMeta {
    pub fn new(scale: f64) -> Self {
        QuantTensorMeta {
            scale,
            zero_point: 0,
            bits: 8,
        }
    }
}

/// What a scale is calibrated for; both use symmetric max-abs / 127.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Activation,
}

/// Symmetric per-tensor scale: `max(|values|) / 127`, or 1 if all values are
/// zero (degenerate rule).
pub fn calibrate_scale(values: &[f32], _kind: TensorKind) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::argument("cannot calibrate an empty value set"));
    }
    let max_abs = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if max_abs == 0.0 {
        return Ok(1.0);
    }
    Ok(max_abs / 127.0)
}

fn round_half_away(v: f64) -> f64 {
    if v >= 0.0 {
        (v + 0.5).floor()
    } else {
        (v - 0.5).ceil()
    }
}

/// Quantize a real value: round-half-away-from-zero(v / s), clamped to
/// [-128, 127].
pub fn quantize(v: f32, s: f64) -> i8 {
    debug_assert!(s > 0.0);
    round_half_away(v as f64 / s).clamp(-128.0, 127.0) as i8
}

/// Weight variant of [`quantize`]: clamped to [-127, 127] to keep the
/// symmetric range.
pub fn quantize_weight(v: f32, s: f64) -> i8 {
    debug_assert!(s > 0.0);
    round_half_away(v as f64 / s).clamp(-127.0, 127.0) as i8
}

pub fn dequantize(q: i8, s: f64) -> f32 {
    (q as f64 * s) as f32
}

/// Best dyadic approximation of a positive real scale: the largest shift
/// `n <= 31` for which `round(s * 2^n)` still fits in 31 bits.
pub fn dyadic_approx(s_real: f64) -> Result<QuantParams> {
    if !s_real.is_finite() || s_real <= 0.0 {
        return Err(Error::argument(format!("scale {s_real} must be positive and finite")));
    }
    let limit = (1u64 << 31) as f64;
    let mut n = 31i32;
    loop {
        if n < 0 {
            return Err(Error::argument(format!(
                "scale {s_real} too large for a dyadic multiplier"
            )));
        }
        let m = (s_real * (n as f64).exp2()).round();
        if m < limit {
            if m < 1.0 {
                return Err(Error::argument(format!(
                    "scale {s_real} too small for a dyadic multiplier"
                )));
            }
            let params = QuantParams {
                m: m as u32,
                n: n as u8,
                s_real,
            };
            if params.relative_error() > DYADIC_REL_TOL {
                return Err(Error::argument(format!(
                    "scale {s_real} cannot be approximated within 2^-14"
                )));
            }
            return Ok(params);
        }
        n -= 1;
    }
}

/// Integer-only rescale of an accumulator: `clamp(round_half_up(acc * m /
/// 2^n), -128, 127)`, computed as a 64-bit product plus `2^(n-1)`, then an
/// arithmetic shift right by `n`.
#[inline]
pub fn requantize(acc: i32, q: &QuantParams) -> i8 {
    let prod = acc as i64 * q.m as i64;
    let shifted = if q.n == 0 {
        prod
    } else {
        (prod + (1i64 << (q.n - 1))) >> q.n
    };
    shifted.clamp(-128, 127) as i8
}

/// Post-activation (and post-residual) float tensors of every conv layer,
/// used to calibrate activation scales. Mirrors the float execution path of
/// the engine exactly.
fn float_forward_trace(
    model: &Model,
    input: &SparseTensor<f32>,
) -> Result<Vec<SparseTensor<f32>>> {
    use crate::engine::{conv1x1, strided_conv3x3, strided_dw3x3, subm_conv3x3, subm_dw3x3, FloatArith};

    let mut trace = Vec::new();
    let mut cur = input.clone();
    let apply = |layer: &Layer, input: &SparseTensor<f32>| -> Result<SparseTensor<f32>> {
        let LayerWeights::Float { w, b } = &layer.weights else {
            return Err(Error::argument("quantize_model expects a float model"));
        };
        let out = match layer.spec.kind {
            LayerKind::Conv1x1 => conv1x1::<FloatArith>(input, w, b, &())?,
            LayerKind::SubmConv3x3 => subm_conv3x3::<FloatArith>(input, w, b, &())?,
            LayerKind::SubmDw3x3 => subm_dw3x3::<FloatArith>(input, w, b, &())?,
            LayerKind::StridedConv3x3 => strided_conv3x3::<FloatArith>(input, w, b, &())?,
            LayerKind::StridedDw3x3 => strided_dw3x3::<FloatArith>(input, w, b, &())?,
            LayerKind::GlobalAvgPool => {
                return Err(Error::shape(&layer.name, "gap is not a conv layer"))
            }
        };
        let mut tensor = out.tensor;
        if layer.act == Activation::Relu6 {
            for v in tensor.features_mut() {
                *v = v.clamp(0.0, 6.0);
            }
        }
        Ok(tensor)
    };

    cur = apply(&model.stem, &cur)?;
    trace.push(cur.clone());
    for b in &model.blocks {
        let block_in = b.residual.is_some().then(|| cur.clone());
        cur = apply(&b.expand, &cur)?;
        trace.push(cur.clone());
        cur = apply(&b.dw, &cur)?;
        trace.push(cur.clone());
        cur = apply(&b.project, &cur)?;
        if let Some(identity) = block_in {
            for (a, &v) in cur.features_mut().iter_mut().zip(identity.features()) {
                *a += v;
            }
        }
        trace.push(cur.clone());
    }
    cur = apply(&model.head_conv, &cur)?;
    trace.push(cur);
    Ok(trace)
}

fn max_abs(values: &[f32]) -> f64 {
    values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

fn scale_of(max: f64) -> f64 {
    if max == 0.0 {
        1.0
    } else {
        max / 127.0
    }
}

fn quantize_layer(layer: &Layer, s_in: f64, s_out: f64) -> Result<Layer> {
    let LayerWeights::Float { w, b } = &layer.weights else {
        return Err(Error::argument("layer already quantized"));
    };
    let s_w = scale_of(max_abs(w));
    let wq: Vec<i8> = w.iter().map(|&v| quantize_weight(v, s_w)).collect();
    // Bias lives at the accumulator scale S_w * S_in.
    let s_bias = s_w * s_in;
    let bq: Vec<i32> = b
        .iter()
        .map(|&v| {
            round_half_away(v as f64 / s_bias)
                .clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect();
    let q = dyadic_approx(s_w * s_in / s_out)?;
    Ok(Layer {
        name: layer.name.clone(),
        spec: layer.spec,
        act: layer.act,
        weights: LayerWeights::Int8 {
            w: wq,
            b: bq,
            q,
            out_scale: s_out,
            relu6_q: relu6_clamp(s_out),
        },
    })
}

/// Post-training quantization of a float model: max-abs calibration of the
/// input and every layer output over the calibration tensors, int8 weights,
/// int32 biases at scale S_w*S_x, and dyadic requantization parameters per
/// layer. The GRU+FC head stays in float.
pub fn quantize_model(model: &Model, calibration: &[SparseTensor<f32>]) -> Result<Model> {
    if calibration.is_empty() {
        return Err(Error::argument("quantize_model needs at least one calibration input"));
    }
    if model.mode.is_int8() {
        return Err(Error::argument("model is already quantized"));
    }
    model.validate()?;

    let mut input_max = 0.0f64;
    let layer_count = model.conv_layers().len();
    let mut out_max = vec![0.0f64; layer_count];
    for t in calibration {
        input_max = input_max.max(max_abs(t.features()));
        let trace = float_forward_trace(model, t)?;
        debug_assert_eq!(trace.len(), layer_count);
        for (m, tensor) in out_max.iter_mut().zip(&trace) {
            *m = m.max(max_abs(tensor.features()));
        }
    }
    let input_scale = scale_of(input_max);
    let s_out: Vec<f64> = out_max.iter().map(|&m| scale_of(m)).collect();

    // Input scale of layer i is the output scale of layer i-1.
    let mut s_in = Vec::with_capacity(layer_count);
    s_in.push(input_scale);
    s_in.extend_from_slice(&s_out[..layer_count - 1]);

    let stem = quantize_layer(&model.stem, s_in[0], s_out[0])?;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (bi, b) in model.blocks.iter().enumerate() {
        let expand_idx = 1 + 3 * bi;
        let project_idx = expand_idx + 2;
        let expand = quantize_layer(&b.expand, s_in[expand_idx], s_out[expand_idx])?;
        let dw = quantize_layer(&b.dw, s_in[expand_idx + 1], s_out[expand_idx + 1])?;
        let project = quantize_layer(&b.project, s_in[project_idx], s_out[project_idx])?;
        let residual = match &b.residual {
            None => None,
            Some(_) => {
                // Identity branch is requantized from the block input scale
                // onto the block's shared output scale.
                let q_identity = dyadic_approx(s_in[expand_idx] / s_out[project_idx])?;
                Some(ResidualAdd::Int8 { q_identity })
            }
        };
        blocks.push(ModelBlock {
            expand,
            dw,
            project,
            residual,
        });
    }
    let last = layer_count - 1;
    let head_conv = quantize_layer(&model.head_conv, s_in[last], s_out[last])?;

    let quantized = Model {
        spec: model.spec.clone(),
        voxel: model.voxel,
        mode: PrecisionMode::Int8 { input_scale },
        stem,
        blocks,
        head_conv,
        head: model.head.clone(),
    };
    quantized.validate()?;
    Ok(quantized)
}
