//! Sparse backbone execution: submanifold 3x3 (dense and depthwise), 1x1,
//! strided downsampling convolutions, pooling, and the full-model runner.
//!
//! Submanifold layers emit output sites identical to their input sites; only
//! active neighbors within each 3x3 window contribute, selected through the
//! same kernel-offset enumeration the accelerator's weight buffer is indexed
//! by. In int8 mode every convolution is integer-only: i8 features and
//! weights, i32 accumulators, multiply-shift requantization. The only float
//! arithmetic on the quantized path is the final embedding division/rescale
//! handed to the CPU-side head.

use crate::error::{Error, Result};
use crate::model::{
    Activation, Layer, LayerKind, LayerWeights, Model, PrecisionMode, ResidualAdd,
};
use crate::quant::{quantize, requantize, QuantParams};
use crate::tensor::{SparseTensor, Value};

/// Execution precision: types and scalar ops of one arithmetic mode.
pub trait Arith {
    type Feat: Value;
    type Weight: Copy + Send + Sync;
    type Bias: Copy + Send + Sync;
    type Acc: Copy;
    type Finish: Sync + ?Sized;

    fn acc_from_bias(b: Self::Bias) -> Self::Acc;
    fn mac(acc: Self::Acc, w: Self::Weight, x: Self::Feat) -> Self::Acc;
    fn finish(acc: Self::Acc, f: &Self::Finish) -> Self::Feat;
}

/// f32 features and accumulators; `finish` is the identity.
pub enum FloatArith {}

impl Arith for FloatArith {
    type Feat = f32;
    type Weight = f32;
    type Bias = f32;
    type Acc = f32;
    type Finish = ();

    #[inline]
    fn acc_from_bias(b: f32) -> f32 {
        b
    }

    #[inline]
    fn mac(acc: f32, w: f32, x: f32) -> f32 {
        acc + w * x
    }

    #[inline]
    fn finish(acc: f32, _f: &()) -> f32 {
        acc
    }
}

/// Integer-only mode: i8 features/weights, i32 bias and accumulator,
/// dyadic multiply-shift requantization back to i8.
pub enum QuantArith {}

impl Arith for QuantArith {
    type Feat = i8;
    type Weight = i8;
    type Bias = i32;
    type Acc = i32;
    type Finish = QuantParams;

    #[inline]
    fn acc_from_bias(b: i32) -> i32 {
        b
    }

    #[inline]
    fn mac(acc: i32, w: i8, x: i8) -> i32 {
        acc + w as i32 * x as i32
    }

    #[inline]
    fn finish(acc: i32, q: &QuantParams) -> i8 {
        requantize(acc, q)
    }
}

/// O(1) site lookup grid for neighborhood gathering.
struct SiteIndex {
    height: i64,
    width: i64,
    idx: Vec<i32>,
}

impl SiteIndex {
    fn build<T: Value>(t: &SparseTensor<T>) -> Self {
        let mut idx = vec![-1i32; t.height() * t.width()];
        for (i, &(y, x)) in t.sites().iter().enumerate() {
            idx[y as usize * t.width() + x as usize] = i as i32;
        }
        SiteIndex {
            height: t.height() as i64,
            width: t.width() as i64,
            idx,
        }
    }

    #[inline]
    fn get(&self, y: i64, x: i64) -> Option<usize> {
        if y < 0 || y >= self.height || x < 0 || x >= self.width {
            return None;
        }
        let v = self.idx[(y * self.width + x) as usize];
        (v >= 0).then_some(v as usize)
    }
}

/// Active positions within a 3x3 window, as strictly increasing offsets
/// 0..=8 (row-major; 4 is the center).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelOffsets {
    offsets: Vec<u8>,
}

impl KernelOffsets {
    pub fn as_slice(&self) -> &[u8] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Offsets of the active neighbors around an active site (border-clipped).
/// The center (offset 4) is always present because `site` must be active.
pub fn kernel_offsets<T: Value>(input: &SparseTensor<T>, site: (u16, u16)) -> Result<KernelOffsets> {
    let (y, x) = site;
    if (y as usize) >= input.height()
        || (x as usize) >= input.width()
        || !input.is_active(y as usize, x as usize)
    {
        return Err(Error::argument(format!(
            "kernel_offsets queried at inactive site ({y},{x})"
        )));
    }
    let mut offsets = Vec::new();
    for o in 0u8..9 {
        let ny = y as i64 + (o as i64 / 3) - 1;
        let nx = x as i64 + (o as i64 % 3) - 1;
        if ny < 0 || ny >= input.height() as i64 || nx < 0 || nx >= input.width() as i64 {
            continue;
        }
        if input.is_active(ny as usize, nx as usize) {
            offsets.push(o);
        }
    }
    Ok(KernelOffsets { offsets })
}

/// Output of one layer: the tensor plus the engine's own work counters.
#[derive(Debug, Clone)]
pub struct LayerOut<T: Value> {
    pub tensor: SparseTensor<T>,
    /// Multiply-accumulate count: sum over output sites and active offsets of
    /// the per-contribution channel work.
    pub macs: u64,
    /// Sum over output sites of their active kernel-offset counts.
    pub offsets_sum: u64,
}

fn check_weights(kind: &str, got_w: usize, want_w: usize, got_b: usize, want_b: usize) -> Result<()> {
    if got_b == 0 {
        return Err(Error::shape(kind, "bias must carry one value per output channel"));
    }
    if got_w != want_w {
        return Err(Error::shape(kind, format!("{got_w} weights, expected {want_w}")));
    }
    if got_b != want_b {
        return Err(Error::shape(kind, format!("{got_b} biases, expected {want_b}")));
    }
    Ok(())
}

/// Submanifold 3x3 convolution: output sites are exactly the input sites;
/// inactive neighbors contribute nothing; zero padding at borders.
/// Weight layout: [offset 0..9][cin][cout], row-major.
pub fn subm_conv3x3<A: Arith>(
    input: &SparseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>> {
    let cin = input.channels();
    let cout = bias.len();
    check_weights("subm_conv3x3", weights.len(), 9 * cin * cout, cout, cout)?;
    let idx = SiteIndex::build(input);
    let nsites = input.site_count();
    let mut features = Vec::with_capacity(nsites * cout);
    let mut acc: Vec<A::Acc> = Vec::with_capacity(cout);
    let mut macs = 0u64;
    let mut offsets_sum = 0u64;
    for si in 0..nsites {
        let (y, x) = input.sites()[si];
        acc.clear();
        acc.extend(bias.iter().map(|&b| A::acc_from_bias(b)));
        let mut offs = 0u64;
        for o in 0..9usize {
            let ny = y as i64 + (o as i64 / 3) - 1;
            let nx = x as i64 + (o as i64 % 3) - 1;
            let Some(nsi) = idx.get(ny, nx) else { continue };
            offs += 1;
            let feat = input.feature(nsi);
            let wbase = o * cin * cout;
            for ci in 0..cin {
                let xv = feat[ci];
                let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                for (a, &w) in acc.iter_mut().zip(wrow) {
                    *a = A::mac(*a, w, xv);
                }
            }
        }
        offsets_sum += offs;
        macs += offs * cin as u64 * cout as u64;
        features.extend(acc.iter().map(|&a| A::finish(a, fin)));
    }
    let tensor = SparseTensor::from_sorted(
        input.height(),
        input.width(),
        cout,
        input.sites().to_vec(),
        features,
    );
    Ok(LayerOut {
        tensor,
        macs,
        offsets_sum,
    })
}

/// Depthwise submanifold 3x3: same site preservation and neighborhood
/// semantics, channelwise. Weight layout: [offset 0..9][channel].
pub fn subm_dw3x3<A: Arith>(
    input: &SparseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>> {
    let c = input.channels();
    check_weights("subm_dw3x3", weights.len(), 9 * c, bias.len(), c)?;
    let idx = SiteIndex::build(input);
    let nsites = input.site_count();
    let mut features = Vec::with_capacity(nsites * c);
    let mut acc: Vec<A::Acc> = Vec::with_capacity(c);
    let mut macs = 0u64;
    let mut offsets_sum = 0u64;
    for si in 0..nsites {
        let (y, x) = input.sites()[si];
        acc.clear();
        acc.extend(bias.iter().map(|&b| A::acc_from_bias(b)));
        let mut offs = 0u64;
        for o in 0..9usize {
            let ny = y as i64 + (o as i64 / 3) - 1;
            let nx = x as i64 + (o as i64 % 3) - 1;
            let Some(nsi) = idx.get(ny, nx) else { continue };
            offs += 1;
            let feat = input.feature(nsi);
            let wrow = &weights[o * c..(o + 1) * c];
            for ch in 0..c {
                acc[ch] = A::mac(acc[ch], wrow[ch], feat[ch]);
            }
        }
        offsets_sum += offs;
        macs += offs * c as u64;
        features.extend(acc.iter().map(|&a| A::finish(a, fin)));
    }
    let tensor = SparseTensor::from_sorted(
        input.height(),
        input.width(),
        c,
        input.sites().to_vec(),
        features,
    );
    Ok(LayerOut {
        tensor,
        macs,
        offsets_sum,
    })
}

/// Pointwise convolution: per-site matrix-vector product; active set
/// preserved. Weight layout: [cin][cout].
pub fn conv1x1<A: Arith>(
    input: &SparseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>> {
    let cin = input.channels();
    let cout = bias.len();
    check_weights("conv1x1", weights.len(), cin * cout, cout, cout)?;
    let nsites = input.site_count();
    let mut features = Vec::with_capacity(nsites * cout);
    let mut acc: Vec<A::Acc> = Vec::with_capacity(cout);
    for si in 0..nsites {
        acc.clear();
        acc.extend(bias.iter().map(|&b| A::acc_from_bias(b)));
        let feat = input.feature(si);
        for ci in 0..cin {
            let xv = feat[ci];
            let wrow = &weights[ci * cout..(ci + 1) * cout];
            for (a, &w) in acc.iter_mut().zip(wrow) {
                *a = A::mac(*a, w, xv);
            }
        }
        features.extend(acc.iter().map(|&a| A::finish(a, fin)));
    }
    let tensor = SparseTensor::from_sorted(
        input.height(),
        input.width(),
        cout,
        input.sites().to_vec(),
        features,
    );
    Ok(LayerOut {
        tensor,
        macs: nsites as u64 * cin as u64 * cout as u64,
        offsets_sum: nsites as u64,
    })
}

/// Strided 3x3 convolution (stride 2, padding 1). Output site (oy, ox) is
/// active iff any input site lies in rows 2oy-1..=2oy+1, cols 2ox-1..=2ox+1;
/// output geometry is (ceil(H/2), ceil(W/2)).
pub fn strided_conv3x3<A: Arith>(
    input: &SparseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>> {
    let cin = input.channels();
    let cout = bias.len();
    check_weights("strided_conv3x3", weights.len(), 9 * cin * cout, cout, cout)?;
    strided_common::<A, _>(input, cout, |acc, neighbors| {
        for &(o, nsi) in neighbors {
            let feat = input.feature(nsi);
            let wbase = o * cin * cout;
            for ci in 0..cin {
                let xv = feat[ci];
                let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                for (a, &w) in acc.iter_mut().zip(wrow) {
                    *a = A::mac(*a, w, xv);
                }
            }
        }
        neighbors.len() as u64 * cin as u64 * cout as u64
    }, bias, fin)
}

/// Depthwise strided 3x3 (stride 2, padding 1): the downsampling layer used
/// inside stride-2 bottleneck blocks.
pub fn strided_dw3x3<A: Arith>(
    input: &SparseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>> {
    let c = input.channels();
    check_weights("strided_dw3x3", weights.len(), 9 * c, bias.len(), c)?;
    strided_common::<A, _>(input, c, |acc, neighbors| {
        for &(o, nsi) in neighbors {
            let feat = input.feature(nsi);
            let wrow = &weights[o * c..(o + 1) * c];
            for ch in 0..c {
                acc[ch] = A::mac(acc[ch], wrow[ch], feat[ch]);
            }
        }
        neighbors.len() as u64 * c as u64
    }, bias, fin)
}

/// Shared strided-3x3 walk: enumerates output cells row-major, gathers the
/// active inputs of each receptive field, and lets `accumulate` do the
/// channel math, returning the MACs it performed.
fn strided_common<A: Arith, F>(
    input: &SparseTensor<A::Feat>,
    cout: usize,
    mut accumulate: F,
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>>
where
    F: FnMut(&mut [A::Acc], &[(usize, usize)]) -> u64,
{
    let oh = input.height().div_ceil(2);
    let ow = input.width().div_ceil(2);
    let idx = SiteIndex::build(input);
    let mut sites = Vec::new();
    let mut features = Vec::new();
    let mut acc: Vec<A::Acc> = Vec::with_capacity(cout);
    let mut neighbors: Vec<(usize, usize)> = Vec::with_capacity(9);
    let mut macs = 0u64;
    let mut offsets_sum = 0u64;
    for oy in 0..oh {
        for ox in 0..ow {
            neighbors.clear();
            for o in 0..9usize {
                let iy = 2 * oy as i64 + (o as i64 / 3) - 1;
                let ix = 2 * ox as i64 + (o as i64 % 3) - 1;
                if let Some(nsi) = idx.get(iy, ix) {
                    neighbors.push((o, nsi));
                }
            }
            if neighbors.is_empty() {
                continue;
            }
            sites.push((oy as u16, ox as u16));
            acc.clear();
            acc.extend(bias.iter().map(|&b| A::acc_from_bias(b)));
            macs += accumulate(&mut acc, &neighbors);
            offsets_sum += neighbors.len() as u64;
            features.extend(acc.iter().map(|&a| A::finish(a, fin)));
        }
    }
    let tensor = SparseTensor::from_sorted(oh, ow, cout, sites, features);
    Ok(LayerOut {
        tensor,
        macs,
        offsets_sum,
    })
}

/// 2x2 max pooling over active sites (stride 2). An output site is active
/// iff any of its four inputs is; inactive inputs are absent, not zero.
pub fn max_pool2x2<T: Value>(input: &SparseTensor<T>) -> SparseTensor<T> {
    let oh = input.height().div_ceil(2);
    let ow = input.width().div_ceil(2);
    let c = input.channels();
    let idx = SiteIndex::build(input);
    let mut sites = Vec::new();
    let mut features = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            let mut cell: Option<Vec<T>> = None;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let iy = 2 * oy as i64 + dy;
                let ix = 2 * ox as i64 + dx;
                if let Some(nsi) = idx.get(iy, ix) {
                    let feat = input.feature(nsi);
                    match &mut cell {
                        None => cell = Some(feat.to_vec()),
                        Some(cur) => {
                            for (acc, &v) in cur.iter_mut().zip(feat) {
                                *acc = acc.maxv(v);
                            }
                        }
                    }
                }
            }
            if let Some(feat) = cell {
                sites.push((oy as u16, ox as u16));
                features.extend(feat);
            }
        }
    }
    SparseTensor::from_sorted(oh, ow, c, sites, features)
}

/// Per-channel summation used by global average pooling.
pub trait GapValue: Value {
    type Sum: Copy;

    fn zero_sum() -> Self::Sum;
    fn accumulate(sum: Self::Sum, v: Self) -> Self::Sum;
    fn sum_to_f64(sum: Self::Sum) -> f64;
}

impl GapValue for f32 {
    type Sum = f64;

    fn zero_sum() -> f64 {
        0.0
    }

    fn accumulate(sum: f64, v: f32) -> f64 {
        sum + v as f64
    }

    fn sum_to_f64(sum: f64) -> f64 {
        sum
    }
}

impl GapValue for i8 {
    type Sum = i64;

    fn zero_sum() -> i64 {
        0
    }

    fn accumulate(sum: i64, v: i8) -> i64 {
        sum + v as i64
    }

    fn sum_to_f64(sum: i64) -> f64 {
        sum as f64
    }
}

/// Per-channel mean over active sites only (zero vector when empty), in the
/// tensor's native value units, plus the accumulate-op count.
pub fn global_avg_pool<T: GapValue>(input: &SparseTensor<T>) -> (Vec<f64>, u64) {
    let c = input.channels();
    let n = input.site_count();
    if n == 0 {
        return (vec![0.0; c], 0);
    }
    let mut sums: Vec<T::Sum> = vec![T::zero_sum(); c];
    for si in 0..n {
        for (s, &v) in sums.iter_mut().zip(input.feature(si)) {
            *s = T::accumulate(*s, v);
        }
    }
    let means = sums
        .into_iter()
        .map(|s| T::sum_to_f64(s) / n as f64)
        .collect();
    (means, n as u64 * c as u64)
}

/// Work counters of one executed layer.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub name: String,
    pub kind: LayerKind,
    pub active_out: usize,
    pub offsets_sum: u64,
    pub macs: u64,
}

impl LayerStats {
    /// Mean active kernel offsets per output site; 1 when the layer saw no
    /// sites (neutral value for the latency model).
    pub fn mean_offsets(&self) -> f64 {
        if self.active_out == 0 {
            1.0
        } else {
            self.offsets_sum as f64 / self.active_out as f64
        }
    }
}

/// Counters for a full backbone run; `float_macs` must be zero on the
/// quantized path (the integer-only audit).
#[derive(Debug, Clone, Default)]
pub struct BackboneStats {
    pub layers: Vec<LayerStats>,
    pub int_macs: u64,
    pub float_macs: u64,
}

impl BackboneStats {
    pub fn total_macs(&self) -> u64 {
        self.int_macs + self.float_macs
    }
}

fn check_input<T: Value>(model: &Model, input: &SparseTensor<T>) -> Result<()> {
    if input.height() != model.spec.input_height as usize
        || input.width() != model.spec.input_width as usize
    {
        return Err(Error::shape(
            "input",
            format!(
                "tensor is {}x{}, model expects {}x{}",
                input.height(),
                input.width(),
                model.spec.input_height,
                model.spec.input_width
            ),
        ));
    }
    if input.channels() != model.spec.in_channels as usize {
        return Err(Error::shape(
            "input",
            format!(
                "tensor has {} channels, model expects {}",
                input.channels(),
                model.spec.in_channels
            ),
        ));
    }
    Ok(())
}

fn dispatch_layer<A: Arith>(
    layer: &Layer,
    input: &SparseTensor<A::Feat>,
    weights: &[A::Weight],
    bias: &[A::Bias],
    fin: &A::Finish,
) -> Result<LayerOut<A::Feat>> {
    if input.channels() != layer.spec.in_channels as usize {
        return Err(Error::shape(
            &layer.name,
            format!(
                "input has {} channels, layer expects {}",
                input.channels(),
                layer.spec.in_channels
            ),
        ));
    }
    match layer.spec.kind {
        LayerKind::Conv1x1 => conv1x1::<A>(input, weights, bias, fin),
        LayerKind::SubmConv3x3 => subm_conv3x3::<A>(input, weights, bias, fin),
        LayerKind::SubmDw3x3 => subm_dw3x3::<A>(input, weights, bias, fin),
        LayerKind::StridedConv3x3 => strided_conv3x3::<A>(input, weights, bias, fin),
        LayerKind::StridedDw3x3 => strided_dw3x3::<A>(input, weights, bias, fin),
        LayerKind::GlobalAvgPool => Err(Error::shape(&layer.name, "gap is not a conv layer")),
    }
}

fn exec_layer_f32(
    layer: &Layer,
    input: SparseTensor<f32>,
    stats: &mut BackboneStats,
) -> Result<SparseTensor<f32>> {
    let LayerWeights::Float { w, b } = &layer.weights else {
        return Err(Error::container(format!(
            "layer {} does not carry float weights",
            layer.name
        )));
    };
    let out = dispatch_layer::<FloatArith>(layer, &input, w, b, &())?;
    let mut tensor = out.tensor;
    if layer.act == Activation::Relu6 {
        for v in tensor.features_mut() {
            *v = v.clampv(0.0, 6.0);
        }
    }
    stats.layers.push(LayerStats {
        name: layer.name.clone(),
        kind: layer.spec.kind,
        active_out: tensor.site_count(),
        offsets_sum: out.offsets_sum,
        macs: out.macs,
    });
    stats.float_macs += out.macs;
    Ok(tensor)
}

fn exec_layer_i8(
    layer: &Layer,
    input: SparseTensor<i8>,
    stats: &mut BackboneStats,
) -> Result<SparseTensor<i8>> {
    let LayerWeights::Int8 { w, b, q, relu6_q, .. } = &layer.weights else {
        return Err(Error::container(format!(
            "layer {} does not carry int8 weights",
            layer.name
        )));
    };
    let out = dispatch_layer::<QuantArith>(layer, &input, w, b, q)?;
    let mut tensor = out.tensor;
    if layer.act == Activation::Relu6 {
        let hi = *relu6_q;
        for v in tensor.features_mut() {
            *v = (*v).clampv(0, hi);
        }
    }
    stats.layers.push(LayerStats {
        name: layer.name.clone(),
        kind: layer.spec.kind,
        active_out: tensor.site_count(),
        offsets_sum: out.offsets_sum,
        macs: out.macs,
    });
    stats.int_macs += out.macs;
    Ok(tensor)
}

fn add_residual_f32(cur: &mut SparseTensor<f32>, identity: &SparseTensor<f32>) -> Result<()> {
    if cur.sites() != identity.sites() || cur.channels() != identity.channels() {
        return Err(Error::shape("residual", "branch site sets differ"));
    }
    for (a, &b) in cur.features_mut().iter_mut().zip(identity.features()) {
        *a += b;
    }
    Ok(())
}

/// Integer residual: requantize the identity branch onto the block's shared
/// output scale, then add with saturation.
fn add_residual_i8(
    cur: &mut SparseTensor<i8>,
    identity: &SparseTensor<i8>,
    q_identity: &QuantParams,
) -> Result<()> {
    if cur.sites() != identity.sites() || cur.channels() != identity.channels() {
        return Err(Error::shape("residual", "branch site sets differ"));
    }
    for (a, &b) in cur.features_mut().iter_mut().zip(identity.features()) {
        let id = requantize(b as i32, q_identity) as i16;
        *a = (*a as i16 + id).clamp(-128, 127) as i8;
    }
    Ok(())
}

/// Quantize a raw voxel tensor onto the model's input scale, preserving the
/// active set exactly.
pub fn quantize_input(input: &SparseTensor<f32>, scale: f64) -> SparseTensor<i8> {
    let features = input.features().iter().map(|&v| quantize(v, scale)).collect();
    SparseTensor::from_sorted(
        input.height(),
        input.width(),
        input.channels(),
        input.sites().to_vec(),
        features,
    )
}

/// Run the backbone over one raw voxel tensor, producing the embedding fed
/// to the recurrent head plus per-layer work statistics.
pub fn run_backbone(model: &Model, input: &SparseTensor<f32>) -> Result<(Vec<f32>, BackboneStats)> {
    model.validate()?;
    check_input(model, input)?;
    let mut stats = BackboneStats::default();
    match model.mode {
        PrecisionMode::Float => {
            let mut cur = input.clone();
            cur = exec_layer_f32(&model.stem, cur, &mut stats)?;
            for b in &model.blocks {
                let block_in = b.residual.is_some().then(|| cur.clone());
                cur = exec_layer_f32(&b.expand, cur, &mut stats)?;
                cur = exec_layer_f32(&b.dw, cur, &mut stats)?;
                cur = exec_layer_f32(&b.project, cur, &mut stats)?;
                if let Some(identity) = block_in {
                    add_residual_f32(&mut cur, &identity)?;
                }
            }
            cur = exec_layer_f32(&model.head_conv, cur, &mut stats)?;
            let (means, gap_ops) = global_avg_pool(&cur);
            stats.layers.push(LayerStats {
                name: "gap".into(),
                kind: LayerKind::GlobalAvgPool,
                active_out: cur.site_count(),
                offsets_sum: cur.site_count() as u64,
                macs: gap_ops,
            });
            stats.float_macs += gap_ops;
            Ok((means.into_iter().map(|m| m as f32).collect(), stats))
        }
        PrecisionMode::Int8 { input_scale } => {
            let mut cur = quantize_input(input, input_scale);
            cur = exec_layer_i8(&model.stem, cur, &mut stats)?;
            for b in &model.blocks {
                let block_in = b.residual.is_some().then(|| cur.clone());
                cur = exec_layer_i8(&b.expand, cur, &mut stats)?;
                cur = exec_layer_i8(&b.dw, cur, &mut stats)?;
                cur = exec_layer_i8(&b.project, cur, &mut stats)?;
                if let Some(identity) = block_in {
                    let Some(ResidualAdd::Int8 { q_identity }) = &b.residual else {
                        return Err(Error::container("residual precision mismatch"));
                    };
                    add_residual_i8(&mut cur, &identity, q_identity)?;
                }
            }
            cur = exec_layer_i8(&model.head_conv, cur, &mut stats)?;
            let (means, gap_ops) = global_avg_pool(&cur);
            stats.layers.push(LayerStats {
                name: "gap".into(),
                kind: LayerKind::GlobalAvgPool,
                active_out: cur.site_count(),
                offsets_sum: cur.site_count() as u64,
                macs: gap_ops,
            });
            stats.int_macs += gap_ops;
            let scale = model.embed_scale();
            Ok((
                means.into_iter().map(|m| (m * scale) as f32).collect(),
                stats,
            ))
        }
    }
}
