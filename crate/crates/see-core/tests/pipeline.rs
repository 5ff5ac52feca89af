//! End-to-end library behavior: backbone composition, sequence running,
//! profile measurement, and container-backed inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use see_core::container::{load_model, save_model};
use see_core::engine::{conv1x1, run_backbone, strided_conv3x3, subm_dw3x3, FloatArith};
use see_core::events::{PolarityMode, VoxelGridConfig};
use see_core::head::{self, fc_regress, gru_step, BackbonePath, HeadState};
use see_core::model::{BlockSpec, LayerWeights, Model, ModelSpec, ResidualAdd};
use see_core::quant::quantize_model;
use see_core::sim::measure_profile;
use see_core::tensor::SparseTensor;

fn two_block_spec(stem_stride: u32, b1_stride: u32) -> ModelSpec {
    ModelSpec {
        input_height: 32,
        input_width: 32,
        in_channels: 3,
        stem_channels: 8,
        stem_stride,
        blocks: vec![
            BlockSpec {
                expansion_ratio: 2,
                in_channels: 8,
                out_channels: 8,
                stride: 1,
            },
            BlockSpec {
                expansion_ratio: 2,
                in_channels: 8,
                out_channels: 16,
                stride: b1_stride,
            },
        ],
        head_channels: 16,
        gru_hidden: 4,
    }
}

fn vox() -> VoxelGridConfig {
    VoxelGridConfig::new(32, 32, 3, PolarityMode::Merged).unwrap()
}

fn random_input(seed: u64, sites: usize) -> SparseTensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = vec![0.0f32; 32 * 32 * 3];
    for _ in 0..sites {
        let y = rng.random_range(0..32usize);
        let x = rng.random_range(0..32usize);
        for c in 0..3 {
            dense[(y * 32 + x) * 3 + c] = rng.random_range(1..6) as f32;
        }
    }
    SparseTensor::from_dense(32, 32, 3, &dense, 0.0).unwrap()
}

/// Manual re-application of the derived layers must equal run_backbone.
#[test]
fn backbone_equals_manual_layer_composition() {
    let spec = two_block_spec(2, 2);
    let model = Model::random_float(&spec, vox(), 31).unwrap();
    let input = random_input(1, 90);
    let (embedding, stats) = run_backbone(&model, &input).unwrap();

    let fl = |l: &see_core::model::Layer| -> (Vec<f32>, Vec<f32>) {
        let LayerWeights::Float { w, b } = &l.weights else { unreachable!() };
        (w.clone(), b.clone())
    };
    // activation clamp applied without touching the active set
    let relu6_keep = |t: &SparseTensor<f32>| -> SparseTensor<f32> {
        let feats: Vec<f32> = t.features().iter().map(|v| v.clamp(0.0, 6.0)).collect();
        SparseTensor::new(t.height(), t.width(), t.channels(), t.sites().to_vec(), feats).unwrap()
    };

    let (w, b) = fl(&model.stem);
    let mut cur = strided_conv3x3::<FloatArith>(&input, &w, &b, &()).unwrap().tensor;
    cur = relu6_keep(&cur);
    for blk in &model.blocks {
        let identity = blk.residual.as_ref().map(|_| cur.clone());
        let (w, b) = fl(&blk.expand);
        cur = relu6_keep(&conv1x1::<FloatArith>(&cur, &w, &b, &()).unwrap().tensor);
        let (w, b) = fl(&blk.dw);
        cur = match blk.dw.spec.kind {
            see_core::model::LayerKind::SubmDw3x3 => {
                relu6_keep(&subm_dw3x3::<FloatArith>(&cur, &w, &b, &()).unwrap().tensor)
            }
            see_core::model::LayerKind::StridedDw3x3 => relu6_keep(
                &see_core::engine::strided_dw3x3::<FloatArith>(&cur, &w, &b, &())
                    .unwrap()
                    .tensor,
            ),
            _ => unreachable!(),
        };
        let (w, b) = fl(&blk.project);
        let mut out = conv1x1::<FloatArith>(&cur, &w, &b, &()).unwrap().tensor;
        if let Some(identity) = identity {
            assert!(matches!(blk.residual, Some(ResidualAdd::Float)));
            let feats: Vec<f32> = out
                .features()
                .iter()
                .zip(identity.features())
                .map(|(a, b)| a + b)
                .collect();
            out =
                SparseTensor::new(out.height(), out.width(), out.channels(), out.sites().to_vec(), feats)
                    .unwrap();
        }
        cur = out;
    }
    let (w, b) = fl(&model.head_conv);
    cur = relu6_keep(&conv1x1::<FloatArith>(&cur, &w, &b, &()).unwrap().tensor);
    let (means, _) = see_core::engine::global_avg_pool(&cur);
    let manual: Vec<f32> = means.iter().map(|&m| m as f32).collect();

    assert_eq!(embedding, manual);
    assert_eq!(stats.layers.len(), spec.layers().len());
}

#[test]
fn empty_input_propagates_zero_embedding() {
    let spec = two_block_spec(2, 1);
    let model = Model::random_float(&spec, vox(), 5).unwrap();
    let empty = SparseTensor::<f32>::empty(32, 32, 3);
    let (embedding, stats) = run_backbone(&model, &empty).unwrap();
    assert!(embedding.iter().all(|&v| v == 0.0));
    assert!(stats.layers.iter().all(|l| l.active_out == 0));
}

#[test]
fn run_sequence_is_composition_and_order_sensitive() {
    let spec = two_block_spec(2, 2);
    let model = Model::random_float(&spec, vox(), 77).unwrap();
    let clips = vec![random_input(10, 60), random_input(11, 80), random_input(12, 40)];

    // Single clip equals gru_step + fc_regress + denormalize by hand.
    let single = head::run_sequence(&model, &clips[..1]).unwrap();
    let (emb, _) = run_backbone(&model, &clips[0]).unwrap();
    let state = gru_step(&emb, &HeadState::zeros(4), &model.head.gru).unwrap();
    let (u, v) = fc_regress(&state.h, &model.head.fc).unwrap();
    assert_eq!(single[0], (u * 32.0, v * 32.0));

    // One prediction per clip, all inside the frame.
    let preds = head::run_sequence(&model, &clips).unwrap();
    assert_eq!(preds.len(), 3);
    for (px, py) in &preds {
        assert!((0.0..=32.0).contains(px) && (0.0..=32.0).contains(py));
    }

    // Permuting the clips changes the outputs (state carries order).
    let permuted = vec![clips[2].clone(), clips[0].clone(), clips[1].clone()];
    let preds2 = head::run_sequence(&model, &permuted).unwrap();
    assert_ne!(preds, preds2);

    // Determinism: bitwise identical reruns.
    assert_eq!(preds, head::run_sequence(&model, &clips).unwrap());
}

#[test]
fn empty_clip_mid_sequence_still_advances_state() {
    let spec = two_block_spec(2, 1);
    let model = Model::random_float(&spec, vox(), 13).unwrap();
    let clips = vec![
        random_input(1, 50),
        SparseTensor::<f32>::empty(32, 32, 3),
        random_input(2, 50),
    ];
    let preds = head::run_sequence(&model, &clips).unwrap();
    assert_eq!(preds.len(), 3);
    // The middle prediction differs from the first: the GRU advanced on a
    // zero embedding rather than repeating its output.
    assert_ne!(preds[0], preds[1]);
}

#[test]
fn measured_profile_matches_stats_recount() {
    let spec = two_block_spec(2, 2);
    let model = Model::random_float(&spec, vox(), 3).unwrap();
    let inputs = vec![random_input(20, 70), random_input(21, 30)];
    let profile = measure_profile(&model, &inputs).unwrap();
    assert_eq!(profile.entries.len(), spec.layers().len());
    profile.validate(&spec).unwrap();

    // Independent recount from per-input runs.
    let mut active = vec![0f64; profile.entries.len()];
    let mut offs = vec![0f64; profile.entries.len()];
    for input in &inputs {
        let (_, stats) = run_backbone(&model, input).unwrap();
        for (i, l) in stats.layers.iter().enumerate() {
            active[i] += l.active_out as f64;
            offs[i] += l.offsets_sum as f64;
        }
    }
    for (i, e) in profile.entries.iter().enumerate() {
        assert_eq!(e.active_sites, active[i] / 2.0);
        let expect_offs = if active[i] == 0.0 { 1.0 } else { offs[i] / active[i] };
        assert!((e.mean_offsets - expect_offs).abs() < 1e-12);
    }
}

#[test]
fn submanifold_only_model_keeps_input_active_count() {
    // stem stride 1 and stride-1 blocks: every layer sees the input sites.
    let spec = two_block_spec(1, 1);
    let model = Model::random_float(&spec, vox(), 9).unwrap();
    let input = random_input(33, 100);
    let n = input.site_count() as f64;
    let profile = measure_profile(&model, std::slice::from_ref(&input)).unwrap();
    for e in &profile.entries {
        assert_eq!(e.active_sites, n);
    }
}

#[test]
fn empty_inputs_profile_is_all_zero() {
    let spec = two_block_spec(2, 1);
    let model = Model::random_float(&spec, vox(), 9).unwrap();
    let inputs = vec![SparseTensor::<f32>::empty(32, 32, 3)];
    let profile = measure_profile(&model, &inputs).unwrap();
    assert!(profile.entries.iter().all(|e| e.active_sites == 0.0));
}

#[test]
fn container_round_trip_preserves_inference() {
    let spec = two_block_spec(2, 2);
    let float = Model::random_float(&spec, vox(), 55).unwrap();
    let cal: Vec<SparseTensor<f32>> = (0..3).map(|i| random_input(40 + i, 80)).collect();
    let model = quantize_model(&float, &cal).unwrap();
    let clips = vec![random_input(50, 60), random_input(51, 90)];
    let direct = head::run_sequence(&model, &clips).unwrap();

    let bytes = save_model(&model).unwrap();
    let loaded = load_model(&bytes).unwrap();
    let via_container = head::run_sequence(&loaded, &clips).unwrap();
    assert_eq!(direct, via_container);
}

#[test]
fn sparse_and_dense_paths_agree_in_int8() {
    let spec = two_block_spec(2, 2);
    let float = Model::random_float(&spec, vox(), 66).unwrap();
    let cal: Vec<SparseTensor<f32>> = (0..3).map(|i| random_input(60 + i, 80)).collect();
    let model = quantize_model(&float, &cal).unwrap();
    let clips = vec![random_input(70, 50), random_input(71, 100)];
    let (sparse, sparse_macs) =
        head::run_sequence_with(&model, &clips, BackbonePath::Sparse).unwrap();
    let (dense, dense_macs) = head::run_sequence_with(&model, &clips, BackbonePath::Dense).unwrap();
    // Integer pipelines over identical masked sets: bitwise-equal predictions.
    assert_eq!(sparse, dense);
    assert!(sparse_macs < dense_macs);
}
