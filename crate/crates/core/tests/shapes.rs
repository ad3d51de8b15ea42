//! Shape audit of the modules and the assembled network.

use dtnet_core::mdic::{DmModule, EmModule, MdicConfig, ThresholdSpec};
use dtnet_core::model::{DtNet, DtNetConfig};
use dtnet_core::nn::{Mode, ParamStore, Session};
use dtnet_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn module_shapes(cin_q in 1usize..3, f_q in 1usize..3, half in 1usize..5, n in 1usize..3, seed in any::<u64>()) {
        let (cin, f, s) = (4 * cin_q, 4 * f_q, 2 * half);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let em = EmModule::new("em", MdicConfig::new(cin, f), Some(ThresholdSpec::default())).unwrap();
        let dm = DmModule::new("dm", MdicConfig::new(f, f)).unwrap();
        let mut store = ParamStore::<f64>::new();
        em.register(&mut store, &mut rng).unwrap();
        dm.register(&mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Mode::Train);
        let x = sess.tape.constant(Tensor::random_uniform(&[n, cin, s, s], -1.0, 1.0, &mut rng));
        let (skip, pooled) = em.forward(&mut sess, x).unwrap();
        prop_assert_eq!(sess.tape.value(skip).shape(), &[n, f, s, s]);
        prop_assert_eq!(sess.tape.value(pooled).shape(), &[n, f, s / 2, s / 2]);
        let y = dm.forward(&mut sess, pooled, Some(skip)).unwrap();
        prop_assert_eq!(sess.tape.value(y).shape(), &[n, f, s, s]);
    }
}

#[test]
fn network_taps_follow_the_resolution_ladder() {
    let cfg = DtNetConfig { input_size: 64, num_classes: 3, ..Default::default() }.with_filters([4, 8, 8, 12, 12]);
    let model = DtNet::<f32>::build(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, model.store(), Mode::Infer);
    s.enable_taps();
    let x = s.tape.constant(Tensor::random_uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng));
    let y = model.forward(&mut s, x).unwrap();
    assert_eq!(s.tape.value(y).shape(), &[2, 3, 64, 64]);
    let taps = s.taps().unwrap().clone();
    let shape = |name: &str| s.tape.value(taps[name]).shape().to_vec();
    let enc = [4, 8, 8, 12, 12];
    for (i, &f) in enc.iter().enumerate() {
        let side = 64 >> i;
        assert_eq!(shape(&format!("enc{}/skip", i + 1)), [2, f, side, side]);
        assert_eq!(shape(&format!("enc{}/pooled", i + 1)), [2, f, side / 2, side / 2]);
        assert_eq!(shape(&format!("enc{}/part1/local", i + 1)), [2, f / 4, side, side]);
    }
    for (j, &f) in enc.iter().rev().enumerate() {
        let side = 4 << j;
        assert_eq!(shape(&format!("dec{}/out", j + 1)), [2, f, side, side]);
    }
}

#[test]
fn mismatched_input_is_rejected() {
    let cfg = DtNetConfig { input_size: 32, ..Default::default() }.with_filters([4, 4, 4, 4, 4]);
    let model = DtNet::<f32>::build(cfg, 0).unwrap();
    assert!(model.infer(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
    assert!(model.infer(&Tensor::zeros(&[1, 2, 32, 32])).is_err());
}
