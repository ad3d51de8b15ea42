//! Sequential and parallel execution give bit-identical results.

use dtnet_core::dataio::synth::synth_dataset;
use dtnet_core::dataio::SynthSpec;
use dtnet_core::exec::set_force_sequential;
use dtnet_core::model::{DtNet, DtNetConfig};
use dtnet_core::train::{train, TrainConfig};

#[test]
fn training_is_identical_in_both_modes() {
    let data = synth_dataset(&SynthSpec { n_images: 6, size: 32, n_classes: 3, seed: 4, ..Default::default() }).unwrap();
    let cfg = DtNetConfig { input_size: 32, num_classes: 3, ..Default::default() }.with_filters([4, 8, 8, 8, 8]);
    let tc = TrainConfig { epochs: 2, batch_size: 3, seed: 1, ..Default::default() };
    let run = |sequential| {
        set_force_sequential(sequential);
        let mut model = DtNet::<f32>::build(cfg.clone(), 1).unwrap();
        let r = train(&mut model, &data, &data, &tc, None, |_| {}).unwrap();
        set_force_sequential(false);
        r
    };
    let (seq, par) = (run(true), run(false));
    assert!(seq.same_outcome(&par));
}
