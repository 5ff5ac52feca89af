//! Architecture description: layer and block specs, the searchable
//! `ModelSpec`, and in-memory models (spec + weights) in float or int8 mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::VoxelGridConfig;
use crate::head::{FcWeights, GruWeights, HeadWeights};
use crate::quant::QuantParams;

/// Layer kinds executable by the engine and modeled by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1x1,
    SubmConv3x3,
    SubmDw3x3,
    StridedConv3x3,
    /// Depthwise counterpart of the strided conv; this is what stride-2
    /// inverted bottlenecks place between expand and project.
    StridedDw3x3,
    GlobalAvgPool,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::SubmConv3x3 => "subm_conv3x3",
            LayerKind::SubmDw3x3 => "subm_dw3x3",
            LayerKind::StridedConv3x3 => "strided_conv3x3",
            LayerKind::StridedDw3x3 => "strided_dw3x3",
            LayerKind::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn is_strided(&self) -> bool {
        matches!(self, LayerKind::StridedConv3x3 | LayerKind::StridedDw3x3)
    }

    pub fn is_depthwise(&self) -> bool {
        matches!(self, LayerKind::SubmDw3x3 | LayerKind::StridedDw3x3)
    }

    pub fn is_3x3(&self) -> bool {
        !matches!(self, LayerKind::Conv1x1 | LayerKind::GlobalAvgPool)
    }
}

/// Activation applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu6,
}

/// One executable layer: kind, channel shape, stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: u32,
    pub out_channels: u32,
    pub stride: u32,
    /// Set on the projection layer of residual blocks.
    #[serde(default)]
    pub has_residual: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_channels: u32, out_channels: u32) -> Self {
        let stride = if kind.is_strided() { 2 } else { 1 };
        LayerSpec {
            kind,
            in_channels,
            out_channels,
            stride,
            has_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape(self.kind.name(), "zero channel count"));
        }
        let want_stride = if self.kind.is_strided() { 2 } else { 1 };
        if self.stride != want_stride {
            return Err(Error::shape(
                self.kind.name(),
                format!("stride {} invalid for this kind", self.stride),
            ));
        }
        if (self.kind.is_depthwise() || self.kind == LayerKind::GlobalAvgPool)
            && self.in_channels != self.out_channels
        {
            return Err(Error::shape(self.kind.name(), "in/out channels must match"));
        }
        Ok(())
    }

    /// Number of weight elements.
    pub fn weight_count(&self) -> usize {
        let cin = self.in_channels as usize;
        let cout = self.out_channels as usize;
        match self.kind {
            LayerKind::Conv1x1 => cin * cout,
            LayerKind::SubmConv3x3 | LayerKind::StridedConv3x3 => 9 * cin * cout,
            LayerKind::SubmDw3x3 | LayerKind::StridedDw3x3 => 9 * cin,
            LayerKind::GlobalAvgPool => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match self.kind {
            LayerKind::GlobalAvgPool => 0,
            _ => self.out_channels as usize,
        }
    }

    pub fn has_weights(&self) -> bool {
        self.kind != LayerKind::GlobalAvgPool
    }
}

/// Inverted bottleneck block: conv1x1 expand -> depthwise 3x3 (strided when
/// stride = 2) -> conv1x1 project, with a residual connection iff stride = 1
/// and in_channels = out_channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion_ratio: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    pub stride: u32,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.expansion_ratio == 0 {
            return Err(Error::shape("block", "expansion ratio must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("block", "zero channel count"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::shape("block", format!("stride {} not in {{1,2}}", self.stride)));
        }
        Ok(())
    }

    pub fn hidden_channels(&self) -> u32 {
        self.in_channels * self.expansion_ratio
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// A layer in the derived execution order, with its name and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
    pub act: Activation,
}

/// Searchable architecture: stem, ordered bottleneck blocks, embedding head,
/// and the GRU hidden size, plus the input geometry it expects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_height: u16,
    pub input_width: u16,
    pub in_channels: u32,
    pub stem_channels: u32,
    /// 1 keeps the stem submanifold; 2 downsamples at the stem.
    pub stem_stride: u32,
    pub blocks: Vec<BlockSpec>,
    /// Embedding width produced by the final conv1x1 + global average pool.
    pub head_channels: u32,
    pub gru_hidden: u32,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_height < 8 || self.input_width < 8 {
            return Err(Error::argument("input geometry must be at least 8x8"));
        }
        if self.in_channels == 0
            || self.stem_channels == 0
            || self.head_channels == 0
            || self.gru_hidden == 0
        {
            return Err(Error::argument("model channel sizes must be positive"));
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return Err(Error::argument("stem stride must be 1 or 2"));
        }
        let mut prev = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != prev {
                return Err(Error::argument(format!(
                    "block {i} expects {} input channels, previous layer provides {prev}",
                    b.in_channels
                )));
            }
            prev = b.out_channels;
        }
        Ok(())
    }

    /// Derived flat layer sequence, including the final global average pool.
    pub fn layers(&self) -> Vec<NamedLayer> {
        let mut out = Vec::with_capacity(2 + 3 * self.blocks.len() + 1);
        let stem_kind = if self.stem_stride == 2 {
            LayerKind::StridedConv3x3
        } else {
            LayerKind::SubmConv3x3
        };
        out.push(NamedLayer {
            name: "stem".into(),
            spec: LayerSpec::new(stem_kind, self.in_channels, self.stem_channels),
            act: Activation::Relu6,
        });
        for (i, b) in self.blocks.iter().enumerate() {
            let hidden = b.hidden_channels();
            out.push(NamedLayer {
                name: format!("b{i}.expand"),
                spec: LayerSpec::new(LayerKind::Conv1x1, b.in_channels, hidden),
                act: Activation::Relu6,
            });
            let dw_kind = if b.stride == 2 {
                LayerKind::StridedDw3x3
            } else {
                LayerKind::SubmDw3x3
            };
            out.push(NamedLayer {
                name: format!("b{i}.dw"),
                spec: LayerSpec::new(dw_kind, hidden, hidden),
                act: Activation::Relu6,
            });
            let mut project = LayerSpec::new(LayerKind::Conv1x1, hidden, b.out_channels);
            project.has_residual = b.has_residual();
            out.push(NamedLayer {
                name: format!("b{i}.project"),
                spec: project,
                act: Activation::None,
            });
        }
        let last = self.blocks.last().map_or(self.stem_channels, |b| b.out_channels);
        out.push(NamedLayer {
            name: "head".into(),
            spec: LayerSpec::new(LayerKind::Conv1x1, last, self.head_channels),
            act: Activation::Relu6,
        });
        out.push(NamedLayer {
            name: "gap".into(),
            spec: LayerSpec::new(LayerKind::GlobalAvgPool, self.head_channels, self.head_channels),
            act: Activation::None,
        });
        out
    }

    /// Output geometry (height, width) of each derived layer, in order.
    pub fn layer_geometries(&self) -> Vec<(usize, usize)> {
        let mut h = self.input_height as usize;
        let mut w = self.input_width as usize;
        self.layers()
            .iter()
            .map(|l| {
                if l.spec.kind.is_strided() {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                (h, w)
            })
            .collect()
    }

    /// Embedding length fed to the GRU.
    pub fn embedding_len(&self) -> usize {
        self.head_channels as usize
    }

    /// Canonical text form; the spec hash is derived from it.
    pub fn canonical_string(&self) -> String {
        use std::fmt::Write;
        let mut s = format!(
            "v1|in{}x{}x{}|stem{}s{}",
            self.input_height, self.input_width, self.in_channels, self.stem_channels, self.stem_stride
        );
        for b in &self.blocks {
            write!(s, "|t{}c{}s{}", b.expansion_ratio, b.out_channels, b.stride).unwrap();
        }
        write!(s, "|head{}|gru{}", self.head_channels, self.gru_hidden).unwrap();
        s
    }

    /// Stable 64-bit FNV-1a hash of the canonical form.
    pub fn spec_hash(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for byte in self.canonical_string().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    pub fn spec_hash_hex(&self) -> String {
        format!("{:016x}", self.spec_hash())
    }
}

/// Execution precision of a model's backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrecisionMode {
    Float,
    /// Integer-only backbone; `input_scale` quantizes the voxel counts.
    Int8 { input_scale: f64 },
}

impl PrecisionMode {
    pub fn is_int8(&self) -> bool {
        matches!(self, PrecisionMode::Int8 { .. })
    }
}

/// Per-layer tensors in the active precision.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Float {
        w: Vec<f32>,
        b: Vec<f32>,
    },
    Int8 {
        w: Vec<i8>,
        b: Vec<i32>,
        q: QuantParams,
        /// Real scale of this layer's int8 output.
        out_scale: f64,
        /// Quantized ReLU6 upper clamp: min(127, round(6 / out_scale)).
        relu6_q: i8,
    },
}

impl LayerWeights {
    pub fn is_int8(&self) -> bool {
        matches!(self, LayerWeights::Int8 { .. })
    }
}

/// Quantized ReLU6 clamp for a given output scale.
pub fn relu6_clamp(out_scale: f64) -> i8 {
    ((6.0 / out_scale).round().min(127.0)) as i8
}

/// A named, weighted, executable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub act: Activation,
    pub weights: LayerWeights,
}

impl Layer {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let (wlen, blen) = match &self.weights {
            LayerWeights::Float { w, b } => (w.len(), b.len()),
            LayerWeights::Int8 { w, b, .. } => (w.len(), b.len()),
        };
        if wlen != self.spec.weight_count() {
            return Err(Error::shape(
                &self.name,
                format!("{wlen} weights, expected {}", self.spec.weight_count()),
            ));
        }
        if blen != self.spec.bias_count() {
            return Err(Error::shape(
                &self.name,
                format!("{blen} biases, expected {}", self.spec.bias_count()),
            ));
        }
        Ok(())
    }
}

/// How a block's identity branch joins the projection output.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualAdd {
    Float,
    /// Requantizes the identity branch onto the block's shared output scale
    /// before the saturating add.
    Int8 { q_identity: QuantParams },
}

/// One weighted inverted bottleneck block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlock {
    pub expand: Layer,
    pub dw: Layer,
    pub project: Layer,
    pub residual: Option<ResidualAdd>,
}

/// A complete model: architecture, voxel input config, backbone weights and
/// the float head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub voxel: VoxelGridConfig,
    pub mode: PrecisionMode,
    pub stem: Layer,
    pub blocks: Vec<ModelBlock>,
    pub head_conv: Layer,
    pub head: HeadWeights,
}

impl Model {
    /// Weighted backbone layers in execution order (gap is implicit).
    pub fn conv_layers(&self) -> Vec<&Layer> {
        let mut out = Vec::with_capacity(2 + 3 * self.blocks.len());
        out.push(&self.stem);
        for b in &self.blocks {
            out.push(&b.expand);
            out.push(&b.dw);
            out.push(&b.project);
        }
        out.push(&self.head_conv);
        out
    }

    /// Scale converting the pooled int8 embedding back to real units.
    pub fn embed_scale(&self) -> f64 {
        match &self.head_conv.weights {
            LayerWeights::Int8 { out_scale, .. } => *out_scale,
            LayerWeights::Float { .. } => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.voxel.channels() != self.spec.in_channels as usize {
            return Err(Error::container(format!(
                "voxel config provides {} channels, model expects {}",
                self.voxel.channels(),
                self.spec.in_channels
            )));
        }
        if (self.voxel.height, self.voxel.width) != (self.spec.input_height, self.spec.input_width)
        {
            return Err(Error::container("voxel geometry differs from model input"));
        }
        let derived = self.spec.layers();
        let stored = self.conv_layers();
        // derived includes the trailing gap
        if derived.len() != stored.len() + 1 {
            return Err(Error::container(format!(
                "{} stored layers for {} derived",
                stored.len(),
                derived.len() - 1
            )));
        }
        for (d, s) in derived.iter().zip(stored.iter()) {
            if d.name != s.name || d.spec != s.spec || d.act != s.act {
                return Err(Error::container(format!(
                    "layer {} does not match the derived architecture",
                    s.name
                )));
            }
            s.validate()?;
            if s.weights.is_int8() != self.mode.is_int8() {
                return Err(Error::container(format!(
                    "layer {} precision differs from model mode",
                    s.name
                )));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let want = self.spec.blocks[i].has_residual();
            if want != b.residual.is_some() {
                return Err(Error::container(format!(
                    "block {i} residual presence mismatch"
                )));
            }
            if let Some(r) = &b.residual {
                if matches!(r, ResidualAdd::Int8 { .. }) != self.mode.is_int8() {
                    return Err(Error::container(format!(
                        "block {i} residual precision differs from model mode"
                    )));
                }
            }
        }
        self.head.validate()?;
        if self.head.gru.input_size != self.spec.embedding_len() {
            return Err(Error::container(format!(
                "gru input size {} differs from embedding length {}",
                self.head.gru.input_size,
                self.spec.embedding_len()
            )));
        }
        if self.head.gru.hidden != self.spec.gru_hidden as usize {
            return Err(Error::container("gru hidden size differs from spec"));
        }
        Ok(())
    }

    /// Float model with uniform random weights, deterministic per seed.
    /// Weight ranges follow a fan-in rule so activations stay well-scaled.
    pub fn random_float(spec: &ModelSpec, voxel: VoxelGridConfig, seed: u64) -> Result<Model> {
        spec.validate()?;
        if voxel.channels() != spec.in_channels as usize {
            return Err(Error::argument("voxel channels differ from model input"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make_layer = |nl: &NamedLayer, rng: &mut ChaCha8Rng| -> Layer {
            let fan_in = match nl.spec.kind {
                LayerKind::Conv1x1 => nl.spec.in_channels as f32,
                _ => 9.0 * nl.spec.in_channels as f32,
            };
            let bound = (1.0 / fan_in.max(1.0)).sqrt();
            let w = (0..nl.spec.weight_count())
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..nl.spec.bias_count())
                .map(|_| rng.random_range(-0.1..0.1f32))
                .collect();
            Layer {
                name: nl.name.clone(),
                spec: nl.spec,
                act: nl.act,
                weights: LayerWeights::Float { w, b },
            }
        };
        let derived = spec.layers();
        let mut iter = derived.iter();
        let stem = make_layer(iter.next().unwrap(), &mut rng);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for bs in &spec.blocks {
            let expand = make_layer(iter.next().unwrap(), &mut rng);
            let dw = make_layer(iter.next().unwrap(), &mut rng);
            let project = make_layer(iter.next().unwrap(), &mut rng);
            blocks.push(ModelBlock {
                expand,
                dw,
                project,
                residual: bs.has_residual().then_some(ResidualAdd::Float),
            });
        }
        let head_conv = make_layer(iter.next().unwrap(), &mut rng);

        let d = spec.embedding_len();
        let hd = spec.gru_hidden as usize;
        let vecf = |n: usize, bound: f32, rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let gb = (1.0 / (d.max(hd) as f32)).sqrt();
        let gru = GruWeights {
            input_size: d,
            hidden: hd,
            w_z: vecf(hd * d, gb, &mut rng),
            w_r: vecf(hd * d, gb, &mut rng),
            w_h: vecf(hd * d, gb, &mut rng),
            u_z: vecf(hd * hd, gb, &mut rng),
            u_r: vecf(hd * hd, gb, &mut rng),
            u_h: vecf(hd * hd, gb, &mut rng),
            b_z: vecf(hd, 0.1, &mut rng),
            b_r: vecf(hd, 0.1, &mut rng),
            b_h: vecf(hd, 0.1, &mut rng),
        };
        let fc = FcWeights {
            hidden: hd,
            w: vecf(2 * hd, gb, &mut rng),
            b: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
        };
        let model = Model {
            spec: spec.clone(),
            voxel,
            mode: PrecisionMode::Float,
            stem,
            blocks,
            head_conv,
            head: HeadWeights { gru, fc },
        };
        model.validate()?;
        Ok(model)
    }
}
