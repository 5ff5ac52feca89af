//! Dense reference semantics: textbook convolutions over full H×W×C arrays.
//!
//! This is the independent oracle the sparse engine is checked against, and
//! the baseline the sparse-vs-dense speedup benchmark runs. The full-model
//! dense runner applies submanifold masking between layers so its predictions
//! stay comparable with the sparse path while still paying the full dense
//! MAC cost per layer.

use crate::engine::{Arith, FloatArith, GapValue, QuantArith};
use crate::error::{Error, Result};
use crate::model::{
    Activation, Layer, LayerKind, LayerSpec, LayerWeights, Model, PrecisionMode, ResidualAdd,
};
use crate::quant::{quantize, requantize};
use crate::tensor::{SparseTensor, Value};

/// Plain dense H×W×C array, row-major (y, x, c).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T: Value> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Value> DenseTensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        DenseTensor {
            height,
            width,
            channels,
            data: vec![T::ZERO; height * width * channels],
        }
    }

    pub fn from_sparse(t: &SparseTensor<T>) -> Self {
        DenseTensor {
            height: t.height(),
            width: t.width(),
            channels: t.channels(),
            data: t.to_dense(),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Textbook dense convolution for every conv layer kind: zero padding 1 for
/// the 3x3 kinds, stride from the spec. Used only for testing and the
/// dense-baseline benchmark.
pub fn dense_oracle<A: Arith>(
    spec: &LayerSpec,
    input: &DenseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<DenseTensor<A::Feat>> {
    spec.validate()?;
    if input.channels != spec.in_channels as usize {
        return Err(Error::shape(
            spec.kind.name(),
            format!(
                "input has {} channels, expected {}",
                input.channels, spec.in_channels
            ),
        ));
    }
    if weights.len() != spec.weight_count() || bias.len() != spec.bias_count() {
        return Err(Error::shape(spec.kind.name(), "weight/bias shape mismatch"));
    }
    let cin = spec.in_channels as usize;
    let cout = spec.out_channels as usize;
    let stride = spec.stride as usize;
    match spec.kind {
        LayerKind::Conv1x1 => {
            let mut out = DenseTensor::zeros(input.height, input.width, cout);
            for y in 0..input.height {
                for x in 0..input.width {
                    let base = (y * input.width + x) * cin;
                    let obase = (y * input.width + x) * cout;
                    for co in 0..cout {
                        let mut acc = A::acc_from_bias(bias[co]);
                        for ci in 0..cin {
                            acc = A::mac(acc, weights[ci * cout + co], input.data[base + ci]);
                        }
                        out.data[obase + co] = A::finish(acc, fin);
                    }
                }
            }
            Ok(out)
        }
        LayerKind::SubmConv3x3 | LayerKind::StridedConv3x3 => {
            let oh = input.height.div_ceil(stride);
            let ow = input.width.div_ceil(stride);
            let mut out = DenseTensor::zeros(oh, ow, cout);
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = (oy * ow + ox) * cout;
                    for co in 0..cout {
                        out.data[obase + co] = {
                            let mut acc = A::acc_from_bias(bias[co]);
                            for o in 0..9usize {
                                let iy = (oy * stride) as i64 + (o as i64 / 3) - 1;
                                let ix = (ox * stride) as i64 + (o as i64 % 3) - 1;
                                if iy < 0
                                    || iy >= input.height as i64
                                    || ix < 0
                                    || ix >= input.width as i64
                                {
                                    continue;
                                }
                                let base = (iy as usize * input.width + ix as usize) * cin;
                                for ci in 0..cin {
                                    acc = A::mac(
                                        acc,
                                        weights[(o * cin + ci) * cout + co],
                                        input.data[base + ci],
                                    );
                                }
                            }
                            A::finish(acc, fin)
                        };
                    }
                }
            }
            Ok(out)
        }
        LayerKind::SubmDw3x3 | LayerKind::StridedDw3x3 => {
            let oh = input.height.div_ceil(stride);
            let ow = input.width.div_ceil(stride);
            let c = cin;
            let mut out = DenseTensor::zeros(oh, ow, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = (oy * ow + ox) * c;
                    for ch in 0..c {
                        let mut acc = A::acc_from_bias(bias[ch]);
                        for o in 0..9usize {
                            let iy = (oy * stride) as i64 + (o as i64 / 3) - 1;
                            let ix = (ox * stride) as i64 + (o as i64 % 3) - 1;
                            if iy < 0
                                || iy >= input.height as i64
                                || ix < 0
                                || ix >= input.width as i64
                            {
                                continue;
                            }
                            acc = A::mac(
                                acc,
                                weights[o * c + ch],
                                input.data[(iy as usize * input.width + ix as usize) * c + ch],
                            );
                        }
                        out.data[obase + ch] = A::finish(acc, fin);
                    }
                }
            }
            Ok(out)
        }
        LayerKind::GlobalAvgPool => Err(Error::argument("dense_oracle covers conv layers only")),
    }
}

/// Full dense MAC cost of one layer at the given input geometry.
pub fn dense_mac_count(spec: &LayerSpec, input_geom: (usize, usize)) -> u64 {
    let (h, w) = input_geom;
    let (oh, ow) = if spec.kind.is_strided() {
        (h.div_ceil(2), w.div_ceil(2))
    } else {
        (h, w)
    };
    let cin = spec.in_channels as u64;
    let cout = spec.out_channels as u64;
    let cells = (oh * ow) as u64;
    match spec.kind {
        LayerKind::Conv1x1 => cells * cin * cout,
        LayerKind::SubmConv3x3 | LayerKind::StridedConv3x3 => cells * 9 * cin * cout,
        LayerKind::SubmDw3x3 | LayerKind::StridedDw3x3 => cells * 9 * cin,
        LayerKind::GlobalAvgPool => cells * cin,
    }
}

/// Occupancy mask carried through the dense pipeline to reproduce the sparse
/// path's submanifold semantics.
#[derive(Debug, Clone)]
struct Mask {
    height: usize,
    width: usize,
    on: Vec<bool>,
}

impl Mask {
    fn from_sparse<T: Value>(t: &SparseTensor<T>) -> Self {
        let mut on = vec![false; t.height() * t.width()];
        for &(y, x) in t.sites() {
            on[y as usize * t.width() + x as usize] = true;
        }
        Mask {
            height: t.height(),
            width: t.width(),
            on,
        }
    }

    /// Receptive-field union under a stride-2 3x3 window.
    fn downsample(&self) -> Mask {
        let oh = self.height.div_ceil(2);
        let ow = self.width.div_ceil(2);
        let mut on = vec![false; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                'probe: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let iy = 2 * oy as i64 + dy;
                        let ix = 2 * ox as i64 + dx;
                        if iy >= 0
                            && iy < self.height as i64
                            && ix >= 0
                            && ix < self.width as i64
                            && self.on[iy as usize * self.width + ix as usize]
                        {
                            on[oy * ow + ox] = true;
                            break 'probe;
                        }
                    }
                }
            }
        }
        Mask {
            height: oh,
            width: ow,
            on,
        }
    }

    fn zero_outside<T: Value>(&self, t: &mut DenseTensor<T>) {
        for y in 0..t.height {
            for x in 0..t.width {
                if !self.on[y * t.width + x] {
                    let base = (y * t.width + x) * t.channels;
                    for v in &mut t.data[base..base + t.channels] {
                        *v = T::ZERO;
                    }
                }
            }
        }
    }

    fn count(&self) -> usize {
        self.on.iter().filter(|&&b| b).count()
    }
}

fn masked_mean<T: GapValue>(t: &DenseTensor<T>, mask: &Mask) -> Vec<f64> {
    let n = mask.count();
    if n == 0 {
        return vec![0.0; t.channels];
    }
    let mut sums = vec![T::zero_sum(); t.channels];
    for y in 0..t.height {
        for x in 0..t.width {
            if mask.on[y * t.width + x] {
                let base = (y * t.width + x) * t.channels;
                for (s, &v) in sums.iter_mut().zip(&t.data[base..base + t.channels]) {
                    *s = T::accumulate(*s, v);
                }
            }
        }
    }
    sums.into_iter().map(|s| T::sum_to_f64(s) / n as f64).collect()
}

fn dense_layer_f32(
    layer: &Layer,
    input: &DenseTensor<f32>,
    mask: &Mask,
) -> Result<(DenseTensor<f32>, Mask)> {
    let LayerWeights::Float { w, b } = &layer.weights else {
        return Err(Error::container(format!(
            "layer {} does not carry float weights",
            layer.name
        )));
    };
    let mut out = dense_oracle::<FloatArith>(&layer.spec, input, w, b, &())?;
    let next_mask = if layer.spec.kind.is_strided() {
        mask.downsample()
    } else {
        mask.clone()
    };
    next_mask.zero_outside(&mut out);
    if layer.act == Activation::Relu6 {
        for v in &mut out.data {
            *v = v.clamp(0.0, 6.0);
        }
    }
    Ok((out, next_mask))
}

fn dense_layer_i8(
    layer: &Layer,
    input: &DenseTensor<i8>,
    mask: &Mask,
) -> Result<(DenseTensor<i8>, Mask)> {
    let LayerWeights::Int8 { w, b, q, relu6_q, .. } = &layer.weights else {
        return Err(Error::container(format!(
            "layer {} does not carry int8 weights",
            layer.name
        )));
    };
    let mut out = dense_oracle::<QuantArith>(&layer.spec, input, w, b, q)?;
    let next_mask = if layer.spec.kind.is_strided() {
        mask.downsample()
    } else {
        mask.clone()
    };
    next_mask.zero_outside(&mut out);
    if layer.act == Activation::Relu6 {
        for v in &mut out.data {
            *v = (*v).clamp(0, *relu6_q);
        }
    }
    Ok((out, next_mask))
}

/// Dense execution of a whole backbone: full dense conv work per layer, with
/// submanifold masking between layers so the embedding matches the sparse
/// path. Returns the embedding and the dense MAC total.
pub fn run_backbone_dense(model: &Model, input: &SparseTensor<f32>) -> Result<(Vec<f32>, u64)> {
    model.validate()?;
    if input.height() != model.spec.input_height as usize
        || input.width() != model.spec.input_width as usize
        || input.channels() != model.spec.in_channels as usize
    {
        return Err(Error::shape("input", "tensor does not match model input"));
    }
    let mut mask = Mask::from_sparse(input);
    let mut macs = 0u64;
    let mut geom = (input.height(), input.width());

    match model.mode {
        PrecisionMode::Float => {
            let mut cur = DenseTensor::from_sparse(input);
            let run = |layer: &Layer, cur: &DenseTensor<f32>, mask: &Mask, geom: &mut (usize, usize), macs: &mut u64|
                -> Result<(DenseTensor<f32>, Mask)> {
                *macs += dense_mac_count(&layer.spec, *geom);
                let out = dense_layer_f32(layer, cur, mask)?;
                *geom = (out.0.height, out.0.width);
                Ok(out)
            };
            let (t, m) = run(&model.stem, &cur, &mask, &mut geom, &mut macs)?;
            cur = t;
            mask = m;
            for blk in &model.blocks {
                let block_in = blk.residual.is_some().then(|| cur.clone());
                let (t, m) = run(&blk.expand, &cur, &mask, &mut geom, &mut macs)?;
                cur = t;
                mask = m;
                let (t, m) = run(&blk.dw, &cur, &mask, &mut geom, &mut macs)?;
                cur = t;
                mask = m;
                let (t, m) = run(&blk.project, &cur, &mask, &mut geom, &mut macs)?;
                cur = t;
                mask = m;
                if let Some(identity) = block_in {
                    for (a, &b) in cur.data.iter_mut().zip(&identity.data) {
                        *a += b;
                    }
                    mask.zero_outside(&mut cur);
                }
            }
            let (t, m) = run(&model.head_conv, &cur, &mask, &mut geom, &mut macs)?;
            cur = t;
            mask = m;
            macs += dense_mac_count(
                &LayerSpec::new(LayerKind::GlobalAvgPool, model.spec.head_channels, model.spec.head_channels),
                geom,
            );
            let means = masked_mean(&cur, &mask);
            Ok((means.into_iter().map(|m| m as f32).collect(), macs))
        }
        PrecisionMode::Int8 { input_scale } => {
            let mut cur = DenseTensor {
                height: input.height(),
                width: input.width(),
                channels: input.channels(),
                data: DenseTensor::from_sparse(input)
                    .data
                    .iter()
                    .map(|&v| quantize(v, input_scale))
                    .collect(),
            };
            let run = |layer: &Layer, cur: &DenseTensor<i8>, mask: &Mask, geom: &mut (usize, usize), macs: &mut u64|
                -> Result<(DenseTensor<i8>, Mask)> {
                *macs += dense_mac_count(&layer.spec, *geom);
                let out = dense_layer_i8(layer, cur, mask)?;
                *geom = (out.0.height, out.0.width);
                Ok(out)
            };
            let (t, m) = run(&model.stem, &cur, &mask, &mut geom, &mut macs)?;
            cur = t;
            mask = m;
            for blk in &model.blocks {
                let block_in = blk.residual.is_some().then(|| cur.clone());
                let (t, m) = run(&blk.expand, &cur, &mask, &mut geom, &mut macs)?;
                cur = t;
                mask = m;
                let (t, m) = run(&blk.dw, &cur, &mask, &mut geom, &mut macs)?;
                cur = t;
                mask = m;
                let (t, m) = run(&blk.project, &cur, &mask, &mut geom, &mut macs)?;
                cur = t;
                mask = m;
                if let Some(identity) = block_in {
                    let Some(ResidualAdd::Int8 { q_identity }) = &blk.residual else {
                        return Err(Error::container("residual precision mismatch"));
                    };
                    for (a, &b) in cur.data.iter_mut().zip(&identity.data) {
                        let id = requantize(b as i32, q_identity) as i16;
                        *a = (*a as i16 + id).clamp(-128, 127) as i8;
                    }
                    mask.zero_outside(&mut cur);
                }
            }
            let (t, m) = run(&model.head_conv, &cur, &mask, &mut geom, &mut macs)?;
            cur = t;
            mask = m;
            macs += dense_mac_count(
                &LayerSpec::new(LayerKind::GlobalAvgPool, model.spec.head_channels, model.spec.head_channels),
                geom,
            );
            let scale = model.embed_scale();
            let means = masked_mean(&cur, &mask);
            Ok((
                means.into_iter().map(|m| (m * scale) as f32).collect(),
                macs,
            ))
        }
    }
}
