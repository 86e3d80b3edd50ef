use depthforge::io::{decode_checkpoint, encode_checkpoint};
use depthforge::training::{fit, three_plane_scene_set, FitReport, FitState, TrainConfig, TrainMode};
use depthforge::units::{NetConfig, SafeNet};

fn cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        iterations,
        height: 32,
        width: 64,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn net() -> SafeNet {
    SafeNet::new(
        NetConfig {
            disp_bias_init: -3.5,
            ..NetConfig::tiny()
        },
        4,
    )
    .unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
    let scenes = three_plane_scene_set(64, 32, TrainMode::Stereo, 3, 2).unwrap();

    let mut straight = net();
    let mut state = FitState::new(&cfg(6)).unwrap();
    let full = fit(&mut straight, &mut state, &scenes, &cfg(6), |_, _, _, _| Ok(())).unwrap();
    let expected = encode_checkpoint(&straight.store, Some(&state.adam), &serde_json::json!({ "iteration": 6 }));

    let mut first = net();
    let mut state = FitState::new(&cfg(3)).unwrap();
    let head = fit(&mut first, &mut state, &scenes, &cfg(3), |_, _, _, _| Ok(())).unwrap();
    let saved = encode_checkpoint(&first.store, Some(&state.adam), &serde_json::json!({ "iteration": 3 }));

    let ckpt = decode_checkpoint(&saved).unwrap();
    let mut resumed = net();
    let mut state = FitState::new(&cfg(6)).unwrap();
    ckpt.restore(&mut resumed.store, Some(&mut state.adam)).unwrap();
    state.iteration = ckpt.meta["iteration"].as_u64().unwrap();
    let tail = fit(&mut resumed, &mut state, &scenes, &cfg(6), |_, _, _, _| Ok(())).unwrap();
    let got = encode_checkpoint(&resumed.store, Some(&state.adam), &serde_json::json!({ "iteration": 6 }));

    assert!(got == expected, "resumed checkpoint differs");
    let joined = FitReport {
        rows: head.rows.into_iter().chain(tail.rows).collect(),
        ..FitReport::default()
    };
    assert_eq!(joined.to_csv(), full.to_csv());
}
