use mars_core::backbone::ModelConfig;
use mars_core::data::synth_landmarks;
use mars_core::metric_losses::LossConfig;
use mars_core::tensor::Tensor;
use mars_core::trainer::*;
use mars_core::transforms::TransformRanges;
use mars_core::Error;

include!("common/cases.rs");

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 5,
        model: ModelConfig {
            channels: vec![8, 16],
            stem_channels: 4,
            input_resolution: 16,
            embedding_dim: 8,
            ..ModelConfig::mars()
        },
        transforms: TransformRanges { brightness: (0.8, 1.2), rotation_deg: (0.0, 360.0), max_translate_frac: 0.1 },
        ..TrainConfig::default()
    }
}

fn data(n: usize, res: usize) -> Vec<Vec<Tensor<f32>>> {
    synth_landmarks(n, res, 3).unwrap().load_images().unwrap()
}

pub fn config_rejects_zero_epochs_and_odd_batches() {
    assert!(matches!(TrainState::new(&tiny_config(0), 10), Err(Error::Config(_))));
    let odd = TrainConfig { batch_size: 7, ..tiny_config(1) };
    assert!(matches!(odd.validate(), Err(Error::Config(_))));
    let parsed: std::result::Result<TrainConfig, _> = toml::from_str("epochs = 3\nbogus = 1");
    assert!(parsed.is_err());
}

pub fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig { learning_rate: 0.0, ..tiny_config(1) };
    let d = data(10, 16);
    let mut state = TrainState::new(&cfg, d.len()).unwrap();
    let before: Vec<Vec<f32>> = state.model.params.iter().map(|(_, _, t)| t.data.clone()).collect();
    let rows = train_epoch(&mut state, &d).unwrap();
    assert!(!rows.is_empty());
    let after: Vec<Vec<f32>> = state.model.params.iter().map(|(_, _, t)| t.data.clone()).collect();
    assert_eq!(before, after);
}

pub fn fixed_seed_gives_identical_trajectories() {
    let d = data(10, 16);
    let a = train(&tiny_config(2), &d, None).unwrap();
    let b = train(&tiny_config(2), &d, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    let c = train(&TrainConfig { seed: 6, ..tiny_config(2) }, &d, None).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

pub fn metrics_rows_carry_per_block_terms() {
    let d = data(10, 16);
    let state = train(&tiny_config(1), &d, None).unwrap();
    // 10 instances in half-batches of 4 → chunks 4, 4, 2.
    assert_eq!(state.metrics.len(), 3);
    for (k, row) in state.metrics.iter().enumerate() {
        assert_eq!(row.step, k + 1);
        assert_eq!(row.epoch, 1);
        let m = row.mars.as_ref().unwrap();
        assert_eq!(m.channel.len(), 2);
        assert!(m.channel.iter().chain(&m.spatial).all(|v| v.is_finite() && *v >= 0.0));
    }
    assert_eq!(
        metrics_header(2),
        ["step", "epoch", "ml_loss", "mars_block_1_ch", "mars_block_1_sp", "mars_block_2_ch", "mars_block_2_sp"]
    );
}

pub fn metrics_csv_round_trips() {
    let d = data(10, 16);
    let state = train(&tiny_config(1), &d, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&path, &state.metrics, 2).unwrap();
    let back = read_metrics_csv(&path).unwrap();
    assert_eq!(back.len(), state.metrics.len());
    for (a, b) in back.iter().zip(&state.metrics) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.ml_loss, b.ml_loss);
        assert_eq!(a.mars.as_ref().unwrap().channel, b.mars.as_ref().unwrap().channel);
        assert_eq!(a.mars.as_ref().unwrap().spatial, b.mars.as_ref().unwrap().spatial);
    }
}

pub fn checkpoint_round_trip_preserves_forward_outputs() {
    let d = data(10, 16);
    let state = train(&tiny_config(1), &d, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::capture(&state).save(&path).unwrap();
    let model = Checkpoint::load(&path).unwrap().model().unwrap();
    let batch = Tensor::from_vec(&[2, 1, 16, 16], d[0][0].data.iter().chain(&d[1][0].data).copied().collect());
    assert_eq!(state.model.embed(&batch).unwrap(), model.embed(&batch).unwrap());
}

pub fn resumed_run_matches_uninterrupted_run() {
    let d = data(10, 16);
    let full = train(&tiny_config(3), &d, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut partial = TrainState::new(&tiny_config(1), d.len()).unwrap();
    fit(&mut partial, &d, Some(dir.path())).unwrap();
    let mut ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    ck.config.epochs = 3;
    let mut resumed = ck.restore().unwrap();
    fit(&mut resumed, &d, None).unwrap();

    assert_eq!(resumed.metrics, full.metrics);
    for ((_, n, a), (_, _, b)) in resumed.model.params.iter().zip(full.model.params.iter()) {
        assert_eq!(a.data, b.data, "{n}");
    }
}

pub fn proxy_loss_checkpoints_restore() {
    let d = data(10, 16);
    let cfg = TrainConfig { loss: LossConfig::ProxyAnchor { margin: 0.1, alpha: 32.0 }, ..tiny_config(1) };
    let state = train(&cfg, &d, None).unwrap();
    let back = Checkpoint::capture(&state).restore().unwrap();
    let p = back.model.proxies.unwrap();
    assert_eq!(back.model.params.get(p).shape, vec![10, 8]);
    assert_eq!(back.model.params.get(p).data, state.model.params.get(p).data);
}

pub fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.json")), Err(Error::Io { .. })));

    let d = data(10, 16);
    let state = TrainState::new(&tiny_config(1), d.len()).unwrap();
    let good = serde_json::to_value(Checkpoint::capture(&state)).unwrap();

    let mut truncated = good.clone();
    truncated["params"][0]["data"] = "AAAA".into();
    std::fs::write(&path, truncated.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&path).unwrap().restore(), Err(Error::Checkpoint(_))));

    let mut other_arch = good.clone();
    other_arch["config"]["model"]["channels"] = serde_json::json!([8, 16, 32]);
    other_arch["config"]["model"]["input_resolution"] = 32.into();
    std::fs::write(&path, other_arch.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&path).unwrap().restore(), Err(Error::Checkpoint(_))));

    let mut future = good;
    future["format"] = 99.into();
    std::fs::write(&path, future.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&path).unwrap().restore(), Err(Error::Checkpoint(_))));
}

pub fn training_needs_two_instances() {
    let d = data(1, 16);
    let mut state = TrainState::new(&tiny_config(1), 1).unwrap();
    assert!(matches!(train_epoch(&mut state, &d), Err(Error::Input(_))));
}

/// Directional: with the regulariser on, every block's channel and spatial
/// terms end below their first-epoch means.
pub fn per_block_regularisation_losses_decrease() {
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        seed: 1,
        model: ModelConfig { input_resolution: 64, ..ModelConfig::mars() },
        transforms: TransformRanges { brightness: (0.8, 1.2), rotation_deg: (0.0, 360.0), max_translate_frac: 0.1 },
        ..TrainConfig::default()
    };
    let d = data(20, 64);
    let state = train(&cfg, &d, None).unwrap();
    let first = epoch_block_means(&state.metrics, 1).unwrap();
    let last = epoch_block_means(&state.metrics, 30).unwrap();
    assert_eq!(first.len(), 4);
    for (i, (f, l)) in first.iter().zip(&last).enumerate() {
        assert!(l.0 < f.0, "block {} channel: {} -> {}", i + 1, f.0, l.0);
        assert!(l.1 < f.1, "block {} spatial: {} -> {}", i + 1, f.1, l.1);
    }
}

cases! {
    config_rejects_zero_epochs_and_odd_batches,
    zero_learning_rate_leaves_parameters_unchanged,
    fixed_seed_gives_identical_trajectories,
    metrics_rows_carry_per_block_terms,
    metrics_csv_round_trips,
    checkpoint_round_trip_preserves_forward_outputs,
    resumed_run_matches_uninterrupted_run,
    proxy_loss_checkpoints_restore,
    corrupt_checkpoints_are_rejected,
    training_needs_two_instances,
    per_block_regularisation_losses_decrease,
}
