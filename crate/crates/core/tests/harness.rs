use dtnet_core::dataio::SynthSpec;
use dtnet_core::harness::{ablation_variants, threshold_sweep, ThresholdSetting};
use dtnet_core::kv::KvDoc;
use dtnet_core::mdic::ThresholdVariant;
use dtnet_core::model::{DtNet, DtNetConfig};
use dtnet_core::run::{replay, DataSource, RunSetup, Split, RUN_HEADER, RUN_MANIFEST};
use dtnet_core::train::TrainConfig;

fn small_setup() -> RunSetup {
    RunSetup {
        model: DtNetConfig { input_size: 32, num_classes: 3, ..Default::default() }.with_filters([4, 8, 8, 8, 8]),
        train: TrainConfig { epochs: 2, batch_size: 2, seed: 3, ..Default::default() },
        data: DataSource::Synthetic(SynthSpec { n_images: 6, size: 32, n_classes: 3, seed: 2, ..Default::default() }),
        split: Split::Count(4),
    }
}

#[test]
fn single_element_sweep_equals_plain_train() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_setup();
    let sweep = threshold_sweep(&base, &[ThresholdSetting::Value(0.1)], &[ThresholdVariant::Epsilon], dir.path(), |_, _| {}).unwrap();
    let plain = base.execute(None, |_| {}).unwrap();
    assert_eq!(sweep.len(), 1);
    assert!(sweep[0].run.same_outcome(&plain.run));
}

#[test]
fn sweep_writes_one_curve_file_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let settings: Vec<_> = ["off", "0.1", "0.3"].iter().map(|s| ThresholdSetting::parse(s).unwrap()).collect();
    let entries = threshold_sweep(&small_setup(), &settings, &[ThresholdVariant::Hard, ThresholdVariant::Epsilon], dir.path(), |_, _| {}).unwrap();
    // disabled runs once, each value once per variant
    assert_eq!(entries.len(), 5);
    for e in &entries {
        let csv = std::fs::read_to_string(dir.path().join(&e.slug).join("curves.csv")).unwrap();
        assert_eq!(csv.lines().filter(|l| l.contains(",test,")).count(), 2);
    }
    let summary = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    assert!(summary.contains("t0.3-hard"));
}

#[test]
fn ablation_variants_are_the_six_strategies() {
    let base = DtNetConfig::default();
    let v = ablation_variants(&base);
    let names: Vec<&str> = v.iter().map(|(n, _, _)| *n).collect();
    assert_eq!(names, ["DT-Net", "DT-Net-no-1", "DT-Net-no-2", "DT-Net-no-3", "DT-Net-no-1-2", "DT-Net-*"]);
    let count = |c: &DtNetConfig| DtNet::<f32>::build(c.clone(), 0).unwrap().count_params().trainable;
    let full = count(&v[0].2);
    assert_eq!(count(&v[2].2), full);
    assert_eq!(count(&v[3].2), full);
    assert_eq!(count(&v[5].2), full);
    assert!(count(&v[1].2) > full);
    assert_eq!(count(&v[4].2), count(&v[1].2));
}

#[test]
fn manifest_replay_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = small_setup().execute(Some(&dir.path().join("a")), |_| {}).unwrap();
    let manifest = KvDoc::read(dir.path().join("a").join(RUN_MANIFEST), RUN_HEADER).unwrap();
    let again = replay(&manifest, Some(&dir.path().join("b")), |_| {}).unwrap();
    assert!(again.run.same_outcome(&first.run));
    let bytes = |d: &str| std::fs::read(dir.path().join(d).join("curves.csv")).unwrap();
    assert_eq!(bytes("a"), bytes("b"));
}

#[test]
fn replay_refuses_changed_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_setup().execute(Some(dir.path()), |_| {}).unwrap();
    let mut m = out.manifest.clone();
    m.set("synth_seed", 99);
    assert!(replay(&m, None, |_| {}).is_err());
}
