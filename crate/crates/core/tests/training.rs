use dtnet_core::dataio::synth::synth_dataset;
use dtnet_core::dataio::SynthSpec;
use dtnet_core::model::{DtNet, DtNetConfig};
use dtnet_core::train::{train, TrainConfig};
use dtnet_core::Error;

fn tiny_model(classes: usize) -> DtNetConfig {
    DtNetConfig { input_size: 32, num_classes: classes, ..Default::default() }.with_filters([4, 8, 8, 8, 8])
}

fn tiny_data(n: usize, classes: usize) -> dtnet_core::dataio::Dataset {
    synth_dataset(&SynthSpec { n_images: n, size: 32, n_classes: classes, seed: 11, ..Default::default() }).unwrap()
}

#[test]
fn one_epoch_records_one_loss() {
    let data = tiny_data(4, 3);
    let mut model = DtNet::<f32>::build(tiny_model(3), 0).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
    let run = train(&mut model, &data, &data, &cfg, None, |_| {}).unwrap();
    assert_eq!(run.epochs(), 1);
    assert!(run.last().train_loss.is_finite());
    assert_eq!(run.curves_csv().lines().count(), 3);
}

#[test]
fn toy_loss_decreases_over_smoothed_window() {
    let data = tiny_data(12, 2);
    let mut model = DtNet::<f32>::build(tiny_model(2), 4).unwrap();
    let cfg = TrainConfig { epochs: 10, batch_size: 4, seed: 4, eval_train: false, ..Default::default() };
    let run = train(&mut model, &data, &data, &cfg, None, |_| {}).unwrap();
    let losses: Vec<f64> = run.records.iter().map(|r| r.train_loss).collect();
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    assert!(losses[9] < losses[0]);
}

#[test]
fn equal_seeds_give_identical_runs() {
    let data = tiny_data(6, 3);
    let cfg = TrainConfig { epochs: 2, batch_size: 3, seed: 7, ..Default::default() };
    let run = |seed| {
        let mut model = DtNet::<f32>::build(tiny_model(3), seed).unwrap();
        train(&mut model, &data, &data, &TrainConfig { seed, ..cfg.clone() }, None, |_| {}).unwrap()
    };
    let (a, b, c) = (run(7), run(7), run(8));
    assert!(a.same_outcome(&b));
    assert_eq!(a.records, b.records);
    assert!(!a.same_outcome(&c));
}

#[test]
fn shape_mismatch_is_rejected() {
    let data = tiny_data(2, 3);
    let mut model = DtNet::<f32>::build(DtNetConfig { input_size: 64, num_classes: 3, ..Default::default() }.with_filters([4, 4, 4, 4, 4]), 0).unwrap();
    let err = train(&mut model, &data, &data, &TrainConfig { epochs: 1, ..Default::default() }, None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Shape { .. } | Error::Config(_) | Error::InvalidArgument(_)), "{err}");
}

#[test]
fn checkpoints_follow_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(2, 3);
    let mut model = DtNet::<f32>::build(tiny_model(3), 0).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 2, checkpoint_every: 2, eval_train: false, ..Default::default() };
    train(&mut model, &data, &data, &cfg, Some(dir.path()), |_| {}).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["epoch_0002", "epoch_0004"]);
    let restored = DtNet::<f32>::load(dir.path().join("checkpoints/epoch_0004")).unwrap();
    assert_eq!(restored.store(), model.store());
}
