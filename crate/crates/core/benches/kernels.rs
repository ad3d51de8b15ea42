use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dtnet_core::dataio::synth::synth_dataset;
use dtnet_core::dataio::SynthSpec;
use dtnet_core::exec::set_force_sequential;
use dtnet_core::kernels::{conv2d, conv2d_backward};
use dtnet_core::model::{DtNet, DtNetConfig};
use dtnet_core::nn::{Mode, Session};
use dtnet_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", true), ("parallel", false)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::random_uniform(&[8, 16, 64, 64], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::random_uniform(&[16, 16, 3, 3], -1.0, 1.0, &mut rng);
    let gy = Tensor::<f32>::random_uniform(&[8, 16, 64, 64], -1.0, 1.0, &mut rng);
    let mut g = c.benchmark_group("conv2d 8x16x64x64 k3");
    for (name, seq) in MODES {
        set_force_sequential(seq);
        g.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| conv2d(&x, &w, None).unwrap()));
        g.bench_function(BenchmarkId::new("backward", name), |b| b.iter(|| conv2d_backward(&x, &w, false, true, &gy).unwrap()));
    }
    g.finish();
    set_force_sequential(false);
}

fn train_step(c: &mut Criterion) {
    let cfg = DtNetConfig { input_size: 64, ..Default::default() }.with_filters([8, 16, 32, 64, 64]);
    let model = DtNet::<f32>::build(cfg, 0).unwrap();
    let data = synth_dataset(&SynthSpec { n_images: 4, size: 64, ..Default::default() }).unwrap();
    let (x, y) = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut g = c.benchmark_group("desk model batch of 4");
    g.sample_size(10);
    for (name, seq) in MODES {
        set_force_sequential(seq);
        g.bench_function(BenchmarkId::new("forward+backward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let mut s = Session::new(&mut tape, model.store(), Mode::Train);
                let xv = s.tape.constant(x.clone());
                let logits = model.forward(&mut s, xv).unwrap();
                let loss = s.tape.softmax_xent(logits, &y).unwrap();
                s.param_grads(loss).unwrap()
            })
        });
    }
    g.finish();
    set_force_sequential(false);
}

fn synth(c: &mut Criterion) {
    let spec = SynthSpec { n_images: 32, size: 64, ..Default::default() };
    let mut g = c.benchmark_group("synth 32 images");
    for (name, seq) in MODES {
        set_force_sequential(seq);
        g.bench_function(name, |b| b.iter(|| synth_dataset(&spec).unwrap()));
    }
    g.finish();
    set_force_sequential(false);
}

criterion_group!(benches, conv, train_step, synth);
criterion_main!(benches);
