use proptest::prelude::*;

use depthforge::eval::{depth_metrics, prepare_monocular, DEFAULT_CAP};
use depthforge::geometry::{warp_stereo, DepthMap, StereoDirection};
use depthforge::io::{decode_checkpoint, decode_pfm, encode_checkpoint, encode_pfm};
use depthforge::training::darken;
use depthforge::units::apu_affinity;
use depthforge::{Owner, ParamStore, Tape, TaskId, Tensor};

fn depths(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.5f64..60.0, n)
}

fn map(v: &[f64]) -> DepthMap {
    DepthMap::from_tensor(Tensor::new(&[1, 1, v.len()], v.to_vec()).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracies_are_monotone_and_metrics_non_negative(p in depths(24), g in depths(24)) {
        let m = depth_metrics(&map(&p), &map(&g), &[true; 24]).unwrap();
        prop_assert!(m.a1 <= m.a2 && m.a2 <= m.a3);
        for v in [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.a1] {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn delta_and_log_error_are_symmetric(p in depths(24), g in depths(24)) {
        let a = depth_metrics(&map(&p), &map(&g), &[true; 24]).unwrap();
        let b = depth_metrics(&map(&g), &map(&p), &[true; 24]).unwrap();
        prop_assert_eq!((a.a1, a.a2, a.a3), (b.a1, b.a2, b.a3));
        prop_assert!((a.rmse_log - b.rmse_log).abs() < 1e-12);
    }

    #[test]
    fn median_scaling_removes_global_scale(p in depths(25), g in depths(25), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = p.iter().map(|v| v * k).collect();
        let base = prepare_monocular(&map(&p), &map(&g), DEFAULT_CAP).unwrap();
        let other = prepare_monocular(&map(&scaled), &map(&g), DEFAULT_CAP).unwrap();
        let a = depth_metrics(&base.pred, &base.gt, &base.mask).unwrap();
        let b = depth_metrics(&other.pred, &other.gt, &other.mask).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
        prop_assert_eq!(a.n_pixels, b.n_pixels);
    }

    #[test]
    fn affinity_rows_are_distributions(
        c in 1usize..5, h in 1usize..5, w in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let f = tape.constant(Tensor::rand_uniform(&[1, c, h, w], -3.0, 3.0, &mut rng));
        let k = tape.constant(Tensor::rand_uniform(&[1, c, h, w], -3.0, 3.0, &mut rng));
        let a = apu_affinity(f, k).unwrap().value();
        for row in a.data().chunks(h * w) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pfm_round_trips_f32_values(h in 1usize..6, w in 1usize..6, vals in prop::collection::vec(-1e4f32..1e4, 36)) {
        let t = Tensor::from_fn(&[1, h, w], |i| vals[i] as f64);
        prop_assert_eq!(decode_pfm(&encode_pfm(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn darkening_stays_in_range(vals in prop::collection::vec(0.0f64..=1.0, 12), s in 0.001f64..=1.0) {
        let img = Tensor::new(&[3, 2, 2], vals.clone()).unwrap();
        let d = darken(&img, s).unwrap();
        for (o, v) in d.data().iter().zip(&vals) {
            prop_assert!((0.0..=1.0).contains(o));
            prop_assert!(*o <= *v);
        }
    }

    #[test]
    fn zero_disparity_warp_is_identity(vals in prop::collection::vec(0.0f64..1.0, 2 * 3 * 5)) {
        let tape = Tape::new();
        let src = Tensor::new(&[1, 2, 3, 5], vals).unwrap();
        let out = warp_stereo(tape.constant(src.clone()), tape.constant(Tensor::zeros(&[1, 1, 3, 5])), StereoDirection::Left).unwrap();
        let image = out.image.value();
        prop_assert_eq!(image.as_ref(), &src);
        prop_assert!(out.valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(vals in prop::collection::vec(any::<f64>(), 7)) {
        let mut store = ParamStore::new();
        store.trainable("a", Owner::Shared, Tensor::new(&[2, 2], vals[..4].to_vec()).unwrap());
        store.trainable("b", Owner::Task(TaskId::Seg), Tensor::new(&[2], vals[4..6].to_vec()).unwrap());
        store.buffer("c", Owner::Task(TaskId::Depth), Tensor::new(&[1], vals[6..].to_vec()).unwrap());
        let bytes = encode_checkpoint(&store, None, &serde_json::json!({ "k": 1 }));
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back.params, None, &back.meta), bytes);
    }
}
