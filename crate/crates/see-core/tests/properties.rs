//! Property tests for the structural invariants: tensor round trips, token
//! ordering, clip partitioning, voxel conservation, quantization bounds,
//! head bounds, and simulator monotonicity.

use proptest::prelude::*;

use see_core::events::{slice_clips, voxelize, Event, PolarityMode, VoxelGridConfig};
use see_core::head::{gru_step, GruWeights, HeadState};
use see_core::model::{BlockSpec, ModelSpec};
use see_core::quant::{dequantize, quantize};
use see_core::sim::{model_latency, HwConfig, LayerProfile, SparsityProfile};
use see_core::tensor::SparseTensor;

fn sparse_f32_strategy() -> impl Strategy<Value = SparseTensor<f32>> {
    (2usize..20, 2usize..20, 1usize..5).prop_flat_map(|(h, w, c)| {
        proptest::collection::vec(
            // values either exactly zero or clearly nonzero, so from_dense
            // round trips are exact
            prop_oneof![Just(0.0f32), (1u32..1000).prop_map(|v| v as f32 / 10.0 - 40.0)],
            h * w * c,
        )
        .prop_map(move |mut dense| {
            for v in &mut dense {
                if *v == -40.0 {
                    *v = 3.25; // avoid the value that collides with zero tolerance
                }
            }
            SparseTensor::from_dense(h, w, c, &dense, 0.0).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dense_round_trip_is_identity(t in sparse_f32_strategy()) {
        let dense = t.to_dense();
        let back = SparseTensor::from_dense(t.height(), t.width(), t.channels(), &dense, 0.0).unwrap();
        prop_assert_eq!(&back, &t);
        // and the other direction
        prop_assert_eq!(back.to_dense(), dense);
    }

    #[test]
    fn tokens_are_strictly_ordered(t in sparse_f32_strategy()) {
        let tokens: Vec<_> = t.tokens().collect();
        prop_assert_eq!(tokens.len(), t.site_count() + 1);
        prop_assert!(tokens.last().unwrap().end);
        let sites: Vec<(u16, u16)> = tokens[..tokens.len() - 1]
            .iter()
            .map(|tok| {
                prop_assert!(!tok.end);
                Ok((tok.y, tok.x))
            })
            .collect::<Result<_, TestCaseError>>()?;
        prop_assert!(sites.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(sites.as_slice(), t.sites());
    }

    #[test]
    fn bitmap_always_consistent(t in sparse_f32_strategy()) {
        prop_assert_eq!(t.bitmap().popcount(), t.site_count());
        t.validate().unwrap();
    }

    #[test]
    fn clip_partition_conserves_events(
        times in proptest::collection::vec(0u64..40_000, 0..300),
        window in 1u64..5000,
    ) {
        let mut times = times;
        times.sort_unstable();
        let events: Vec<Event> = times
            .iter()
            .map(|&t| Event { t, x: 1, y: 1, p: 0 })
            .collect();
        let clips = slice_clips(&events, window, 0, 0, (8, 8)).unwrap();
        let total: usize = clips.iter().map(|c| c.events.len()).sum();
        prop_assert_eq!(total, events.len());
        for (i, clip) in clips.iter().enumerate() {
            prop_assert_eq!(clip.t_start, i as u64 * window);
            prop_assert_eq!(clip.t_end - clip.t_start, window);
            for ev in &clip.events {
                prop_assert!(ev.t >= clip.t_start && ev.t < clip.t_end);
            }
        }
    }

    #[test]
    fn voxelization_conserves_event_count(
        coords in proptest::collection::vec((0u64..1000, 0u16..16, 0u16..16, 0u8..2), 0..200),
    ) {
        let mut events: Vec<Event> = coords
            .iter()
            .map(|&(t, x, y, p)| Event { t, x, y, p })
            .collect();
        events.sort_by_key(|e| e.t);
        let clip = see_core::events::EventClip {
            events: events.clone(),
            t_start: 0,
            t_end: 1000,
            geometry: (16, 16),
        };
        let cfg = VoxelGridConfig::new(16, 16, 3, PolarityMode::Merged).unwrap();
        let t = voxelize(&clip, &cfg).unwrap();
        let total: f32 = t.features().iter().sum();
        prop_assert_eq!(total, events.len() as f32);
        // active set = set of distinct (y,x)
        let mut expect: Vec<(u16, u16)> = events.iter().map(|e| (e.y, e.x)).collect();
        expect.sort_unstable();
        expect.dedup();
        prop_assert_eq!(t.sites(), expect.as_slice());
    }

    #[test]
    fn quantize_round_trip_bounded(v in -10.0f32..10.0, s in 0.01f64..0.5) {
        prop_assume!((v as f64).abs() <= 127.0 * s);
        let back = dequantize(quantize(v, s), s);
        prop_assert!(((back - v) as f64).abs() <= s / 2.0 + 1e-6);
    }

    #[test]
    fn gru_state_convex_bound(
        h0 in proptest::collection::vec(-3.0f32..3.0, 4),
        x in proptest::collection::vec(-3.0f32..3.0, 4),
        wseed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(wseed);
        let mut vecf = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let w = GruWeights {
            input_size: 4,
            hidden: 4,
            w_z: vecf(16), w_r: vecf(16), w_h: vecf(16),
            u_z: vecf(16), u_r: vecf(16), u_h: vecf(16),
            b_z: vecf(4), b_r: vecf(4), b_h: vecf(4),
        };
        let next = gru_step(&x, &HeadState { h: h0.clone() }, &w).unwrap();
        for (a, b) in next.h.iter().zip(&h0) {
            prop_assert!(a.is_finite());
            prop_assert!(a.abs() <= b.abs().max(1.0) + 1e-5);
        }
    }

    #[test]
    fn simulator_monotone_in_density(
        active in 1.0f64..100.0,
        offsets in 1.0f64..9.0,
        scale in 1.05f64..3.0,
    ) {
        let spec = ModelSpec {
            input_height: 64,
            input_width: 64,
            in_channels: 3,
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![BlockSpec {
                expansion_ratio: 2,
                in_channels: 8,
                out_channels: 16,
                stride: 2,
            }],
            head_channels: 16,
            gru_hidden: 8,
        };
        let hw = HwConfig::default();
        let profile = SparsityProfile {
            entries: spec.layers().iter().map(|_| LayerProfile {
                active_sites: active,
                mean_offsets: offsets,
            }).collect(),
        };
        let denser = SparsityProfile {
            entries: profile.entries.iter().map(|e| LayerProfile {
                active_sites: (e.active_sites * scale).min(256.0),
                mean_offsets: e.mean_offsets,
            }).collect(),
        };
        let r1 = model_latency(&spec, &profile, &hw).unwrap();
        let r2 = model_latency(&spec, &denser, &hw).unwrap();
        prop_assert!(r2.scnn_cycles >= r1.scnn_cycles);
        prop_assert!(r2.total_latency_s >= r1.total_latency_s);
    }
}
