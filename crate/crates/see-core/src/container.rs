//! Weight container: a single file holding a human-readable TOML manifest
//! (model spec, voxel config, per-layer shapes, activations, quantization
//! parameters) followed by a binary blob of concatenated little-endian
//! tensors in manifest order.
//!
//! File layout:
//!   bytes 0..8    magic "SEEMODEL"
//!   bytes 8..12   u32 LE manifest byte length
//!   bytes 12..16  u32 LE blob byte length
//!   manifest      UTF-8 TOML
//!   blob          backbone layer sections, then the float head section
//!
//! Backbone layer section (int8 mode): int8 weights, int32 biases, then the
//! layer's QuantParams as (m: u32 LE, n: u8). Float mode: f32 weights and
//! biases. The head section is always f32: W_z W_r W_h U_z U_r U_h b_z b_r
//! b_h, FC weights, FC bias. QuantParams appear both in the manifest (for
//! auditing) and in the blob; the loader cross-checks them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::VoxelGridConfig;
use crate::head::{FcWeights, GruWeights, HeadWeights};
use crate::model::{
    relu6_clamp, Activation, Layer, LayerKind, LayerWeights, Model, ModelBlock, ModelSpec,
    PrecisionMode, ResidualAdd,
};
use crate::quant::QuantParams;

const MAGIC: &[u8; 8] = b"SEEMODEL";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct QuantParamsDoc {
    m: u32,
    n: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    kind: LayerKind,
    in_channels: u32,
    out_channels: u32,
    stride: u32,
    activation: Activation,
    weight_bytes: u64,
    bias_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    qparams: Option<QuantParamsDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResidualDoc {
    block: usize,
    qparams: QuantParamsDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InputDoc {
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadDoc {
    gru_input: u32,
    gru_hidden: u32,
    head_bytes: u64,
}

/// The manifest document; field order here is the serialized order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    mode: String,
    spec_hash: String,
    voxel: VoxelGridConfig,
    model: ModelSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<InputDoc>,
    layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    residuals: Vec<ResidualDoc>,
    head: HeadDoc,
}

fn push_f32s(blob: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn head_byte_len(gru: &GruWeights, fc: &FcWeights) -> u64 {
    let gru_elems = 3 * gru.hidden * gru.input_size + 3 * gru.hidden * gru.hidden + 3 * gru.hidden;
    ((gru_elems + fc.w.len() + 2) * 4) as u64
}

fn layer_doc(layer: &Layer) -> LayerDoc {
    let (weight_bytes, bias_bytes, qparams, output_scale) = match &layer.weights {
        LayerWeights::Float { w, b } => ((w.len() * 4) as u64, (b.len() * 4) as u64, None, None),
        LayerWeights::Int8 { w, b, q, out_scale, .. } => (
            w.len() as u64,
            (b.len() * 4) as u64,
            Some(QuantParamsDoc { m: q.m, n: q.n }),
            Some(*out_scale),
        ),
    };
    LayerDoc {
        name: layer.name.clone(),
        kind: layer.spec.kind,
        in_channels: layer.spec.in_channels,
        out_channels: layer.spec.out_channels,
        stride: layer.spec.stride,
        activation: layer.act,
        weight_bytes,
        bias_bytes,
        qparams,
        output_scale,
    }
}

/// Serialize a model into container bytes.
pub fn save_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let layers = model.conv_layers();
    let mut blob = Vec::new();
    let mut layer_docs = Vec::with_capacity(layers.len());
    for layer in &layers {
        layer_docs.push(layer_doc(layer));
        match &layer.weights {
            LayerWeights::Float { w, b } => {
                push_f32s(&mut blob, w);
                push_f32s(&mut blob, b);
            }
            LayerWeights::Int8 { w, b, q, .. } => {
                blob.extend(w.iter().map(|&v| v as u8));
                for v in b {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                blob.extend_from_slice(&q.m.to_le_bytes());
                blob.push(q.n);
            }
        }
    }
    let mut residuals = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        if let Some(ResidualAdd::Int8 { q_identity }) = &b.residual {
            residuals.push(ResidualDoc {
                block: i,
                qparams: QuantParamsDoc {
                    m: q_identity.m,
                    n: q_identity.n,
                },
            });
        }
    }
    let gru = &model.head.gru;
    let fc = &model.head.fc;
    for t in [&gru.w_z, &gru.w_r, &gru.w_h, &gru.u_z, &gru.u_r, &gru.u_h, &gru.b_z, &gru.b_r, &gru.b_h]
    {
        push_f32s(&mut blob, t);
    }
    push_f32s(&mut blob, &fc.w);
    push_f32s(&mut blob, &fc.b);

    let manifest = Manifest {
        format_version: 1,
        mode: match model.mode {
            PrecisionMode::Float => "float".into(),
            PrecisionMode::Int8 { .. } => "int8".into(),
        },
        spec_hash: model.spec.spec_hash_hex(),
        voxel: model.voxel,
        model: model.spec.clone(),
        input: match model.mode {
            PrecisionMode::Float => None,
            PrecisionMode::Int8 { input_scale } => Some(InputDoc { scale: input_scale }),
        },
        layers: layer_docs,
        residuals,
        head: HeadDoc {
            gru_input: gru.input_size as u32,
            gru_hidden: gru.hidden as u32,
            head_bytes: head_byte_len(gru, fc),
        },
    };
    let manifest_text =
        toml::to_string(&manifest).map_err(|e| Error::container(format!("manifest: {e}")))?;

    let mut out = Vec::with_capacity(HEADER_LEN + manifest_text.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_text.len() as u32).to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_model_file(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, save_model(model)?)?;
    Ok(())
}

struct BlobReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.data.len() {
            return Err(Error::container(format!(
                "blob truncated reading {what}: need {len} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i32s(&mut self, count: usize, what: &str) -> Result<Vec<i32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i8s(&mut self, count: usize, what: &str) -> Result<Vec<i8>> {
        let raw = self.take(count, what)?;
        Ok(raw.iter().map(|&b| b as i8).collect())
    }
}

fn split_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::container("not a weight container (bad magic)"));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let blob_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if HEADER_LEN + manifest_len + blob_len != bytes.len() {
        return Err(Error::container(format!(
            "container length {} does not match header ({manifest_len} manifest + {blob_len} blob)",
            bytes.len()
        )));
    }
    let manifest_text = std::str::from_utf8(&bytes[HEADER_LEN..HEADER_LEN + manifest_len])
        .map_err(|_| Error::container("manifest is not utf-8"))?;
    let manifest: Manifest =
        toml::from_str(manifest_text).map_err(|e| Error::container(format!("manifest: {e}")))?;
    if manifest.format_version != 1 {
        return Err(Error::container(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, &bytes[HEADER_LEN + manifest_len..]))
}

/// Deserialize and fully validate a model container.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    let (manifest, blob) = split_container(bytes)?;
    let spec = manifest.model.clone();
    spec.validate()?;
    if manifest.spec_hash != spec.spec_hash_hex() {
        return Err(Error::container(format!(
            "spec hash {} does not match recomputed {}",
            manifest.spec_hash,
            spec.spec_hash_hex()
        )));
    }
    let is_int8 = match manifest.mode.as_str() {
        "float" => false,
        "int8" => true,
        other => return Err(Error::container(format!("unknown mode {other:?}"))),
    };
    if is_int8 && manifest.input.is_none() {
        return Err(Error::container("int8 container missing [input] scale"));
    }

    // Declared section lengths must sum to the blob length.
    let declared: u64 = manifest
        .layers
        .iter()
        .map(|l| l.weight_bytes + l.bias_bytes + if is_int8 { 5 } else { 0 })
        .sum::<u64>()
        + manifest.head.head_bytes;
    if declared != blob.len() as u64 {
        return Err(Error::container(format!(
            "declared tensor bytes {declared} do not sum to blob length {}",
            blob.len()
        )));
    }

    let derived = spec.layers();
    let conv_derived: Vec<_> = derived
        .iter()
        .filter(|l| l.spec.kind != LayerKind::GlobalAvgPool)
        .collect();
    if manifest.layers.len() != conv_derived.len() {
        return Err(Error::container(format!(
            "manifest lists {} layers, spec derives {}",
            manifest.layers.len(),
            conv_derived.len()
        )));
    }

    let mut reader = BlobReader { data: blob, pos: 0 };
    let mut loaded: Vec<Layer> = Vec::with_capacity(manifest.layers.len());
    for (doc, want) in manifest.layers.iter().zip(&conv_derived) {
        if doc.name != want.name
            || doc.kind != want.spec.kind
            || doc.in_channels != want.spec.in_channels
            || doc.out_channels != want.spec.out_channels
            || doc.stride != want.spec.stride
            || doc.activation != want.act
        {
            return Err(Error::container(format!(
                "layer {} does not match the derived architecture",
                doc.name
            )));
        }
        let wcount = want.spec.weight_count();
        let bcount = want.spec.bias_count();
        let weights = if is_int8 {
            if doc.weight_bytes != wcount as u64 || doc.bias_bytes != (bcount * 4) as u64 {
                return Err(Error::container(format!(
                    "layer {} declares wrong tensor sizes",
                    doc.name
                )));
            }
            let w = reader.i8s(wcount, &doc.name)?;
            let b = reader.i32s(bcount, &doc.name)?;
            let m = u32::from_le_bytes(reader.take(4, &doc.name)?.try_into().unwrap());
            let n = reader.take(1, &doc.name)?[0];
            let q = QuantParams::from_raw(m, n)?;
            let doc_q = doc.qparams.ok_or_else(|| {
                Error::container(format!("layer {} missing manifest qparams", doc.name))
            })?;
            if doc_q.m != m || doc_q.n != n {
                return Err(Error::container(format!(
                    "layer {}: manifest qparams ({},{}) differ from blob ({m},{n})",
                    doc.name, doc_q.m, doc_q.n
                )));
            }
            let out_scale = doc.output_scale.ok_or_else(|| {
                Error::container(format!("layer {} missing output_scale", doc.name))
            })?;
            if out_scale <= 0.0 || !out_scale.is_finite() {
                return Err(Error::container(format!(
                    "layer {}: output_scale {out_scale} invalid",
                    doc.name
                )));
            }
            LayerWeights::Int8 {
                w,
                b,
                q,
                out_scale,
                relu6_q: relu6_clamp(out_scale),
            }
        } else {
            if doc.weight_bytes != (wcount * 4) as u64 || doc.bias_bytes != (bcount * 4) as u64 {
                return Err(Error::container(format!(
                    "layer {} declares wrong tensor sizes",
                    doc.name
                )));
            }
            LayerWeights::Float {
                w: reader.f32s(wcount, &doc.name)?,
                b: reader.f32s(bcount, &doc.name)?,
            }
        };
        loaded.push(Layer {
            name: want.name.clone(),
            spec: want.spec,
            act: want.act,
            weights,
        });
    }

    // Head section.
    let d = manifest.head.gru_input as usize;
    let hd = manifest.head.gru_hidden as usize;
    let gru = GruWeights {
        input_size: d,
        hidden: hd,
        w_z: reader.f32s(hd * d, "gru.w_z")?,
        w_r: reader.f32s(hd * d, "gru.w_r")?,
        w_h: reader.f32s(hd * d, "gru.w_h")?,
        u_z: reader.f32s(hd * hd, "gru.u_z")?,
        u_r: reader.f32s(hd * hd, "gru.u_r")?,
        u_h: reader.f32s(hd * hd, "gru.u_h")?,
        b_z: reader.f32s(hd, "gru.b_z")?,
        b_r: reader.f32s(hd, "gru.b_r")?,
        b_h: reader.f32s(hd, "gru.b_h")?,
    };
    let fc_w = reader.f32s(2 * hd, "fc.w")?;
    let fc_b = reader.f32s(2, "fc.b")?;
    if reader.pos != blob.len() {
        return Err(Error::container(format!(
            "blob has {} trailing bytes",
            blob.len() - reader.pos
        )));
    }
    let head = HeadWeights {
        gru,
        fc: FcWeights {
            hidden: hd,
            w: fc_w,
            b: [fc_b[0], fc_b[1]],
        },
    };

    // Reassemble blocks.
    let mut iter = loaded.into_iter();
    let stem = iter.next().unwrap();
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (i, bs) in spec.blocks.iter().enumerate() {
        let expand = iter.next().unwrap();
        let dw = iter.next().unwrap();
        let project = iter.next().unwrap();
        let residual = if bs.has_residual() {
            if is_int8 {
                let doc = manifest
                    .residuals
                    .iter()
                    .find(|r| r.block == i)
                    .ok_or_else(|| {
                        Error::container(format!("block {i} missing residual qparams"))
                    })?;
                Some(ResidualAdd::Int8 {
                    q_identity: QuantParams::from_raw(doc.qparams.m, doc.qparams.n)?,
                })
            } else {
                Some(ResidualAdd::Float)
            }
        } else {
            None
        };
        blocks.push(ModelBlock {
            expand,
            dw,
            project,
            residual,
        });
    }
    let head_conv = iter.next().unwrap();

    let model = Model {
        spec,
        voxel: manifest.voxel,
        mode: if is_int8 {
            PrecisionMode::Int8 {
                input_scale: manifest.input.unwrap().scale,
            }
        } else {
            PrecisionMode::Float
        },
        stem,
        blocks,
        head_conv,
        head,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model_file(path: &Path) -> Result<Model> {
    load_model(&std::fs::read(path)?)
}

/// Byte count of the backbone tensor section (weights + biases + per-layer
/// QuantParams), excluding the float head. This is the on-chip budget the
/// simulator's weight footprint must equal for int8 containers.
pub fn backbone_section_bytes(bytes: &[u8]) -> Result<u64> {
    let (manifest, _) = split_container(bytes)?;
    let is_int8 = manifest.mode == "int8";
    Ok(manifest
        .layers
        .iter()
        .map(|l| l.weight_bytes + l.bias_bytes + if is_int8 { 5 } else { 0 })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::PolarityMode;
    use crate::model::BlockSpec;
    use crate::quant::quantize_model;
    use crate::tensor::SparseTensor;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_height: 32,
            input_width: 32,
            in_channels: 3,
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![BlockSpec {
                expansion_ratio: 2,
                in_channels: 8,
                out_channels: 8,
                stride: 1,
            }],
            head_channels: 8,
            gru_hidden: 4,
        }
    }

    fn float_model() -> Model {
        let vox = VoxelGridConfig::new(32, 32, 3, PolarityMode::Merged).unwrap();
        Model::random_float(&spec(), vox, 5).unwrap()
    }

    fn calibration() -> Vec<SparseTensor<f32>> {
        let mut dense = vec![0.0f32; 32 * 32 * 3];
        for i in 0..60 {
            let y = (i * 7) % 32;
            let x = (i * 13) % 32;
            for c in 0..3 {
                dense[(y * 32 + x) * 3 + c] = ((i + c) % 5) as f32;
            }
        }
        vec![SparseTensor::from_dense(32, 32, 3, &dense, 0.0).unwrap()]
    }

    #[test]
    fn float_round_trip() {
        let model = float_model();
        let bytes = save_model(&model).unwrap();
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn int8_round_trip() {
        let model = quantize_model(&float_model(), &calibration()).unwrap();
        let bytes = save_model(&model).unwrap();
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn manifest_is_readable_toml_with_version() {
        let bytes = save_model(&float_model()).unwrap();
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + mlen]).unwrap();
        assert!(text.starts_with("format_version = 1"));
        assert!(text.contains("[voxel]"));
        assert!(text.contains("[[layers]]"));
    }

    #[test]
    fn corrupted_length_is_container_error() {
        let mut bytes = save_model(&float_model()).unwrap();
        // Shrink the declared blob length.
        let blob_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        bytes[12..16].copy_from_slice(&(blob_len - 1).to_le_bytes());
        let err = load_model(&bytes).unwrap_err();
        assert!(matches!(err, Error::Container(_)));
    }

    #[test]
    fn tampered_spec_hash_rejected() {
        let model = float_model();
        let bytes = save_model(&model).unwrap();
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + mlen]).unwrap();
        let bad = text.replacen(&model.spec.spec_hash_hex(), "0000000000000000", 1);
        assert_eq!(bad.len(), text.len());
        let mut tampered = bytes[..16].to_vec();
        tampered.extend_from_slice(bad.as_bytes());
        tampered.extend_from_slice(&bytes[16 + mlen..]);
        let err = load_model(&tampered).unwrap_err();
        assert!(err.to_string().contains("spec hash"));
    }

    #[test]
    fn truncated_blob_names_failing_layer() {
        let model = float_model();
        let mut bytes = save_model(&model).unwrap();
        let cut = bytes.len() - 40;
        bytes.truncate(cut);
        // Fix up the header so only the blob is short.
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let new_blob_len = (cut - 16 - mlen) as u32;
        bytes[12..16].copy_from_slice(&new_blob_len.to_le_bytes());
        let err = load_model(&bytes).unwrap_err();
        assert!(matches!(err, Error::Container(_)));
    }

    #[test]
    fn backbone_bytes_match_footprint_formula() {
        let model = quantize_model(&float_model(), &calibration()).unwrap();
        let bytes = save_model(&model).unwrap();
        let section = backbone_section_bytes(&bytes).unwrap();
        let expect: u64 = model
            .spec
            .layers()
            .iter()
            .filter(|l| l.spec.has_weights())
            .map(|l| l.spec.weight_count() as u64 + 4 * l.spec.bias_count() as u64 + 5)
            .sum();
        assert_eq!(section, expect);
        // The simulator's weight footprint is defined as exactly this size.
        assert_eq!(section, crate::sim::weight_footprint(&model.spec));
    }
}
