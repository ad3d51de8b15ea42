//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use dtnet_core::mdic::PartScheme;
use dtnet_core::model::DtNetConfig;
use dtnet_core::{LabelMap, Tensor};

/// Direct seven-loop convolution, stride 1, same zero padding.
pub fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * f * h * wd];
    for b in 0..n {
        for o in 0..f {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (si, sj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ci) * h + si as usize) * wd + sj as usize]
                                    * w.data()[((o * c + ci) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((b * f + o) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, h, wd], out).unwrap()
}

/// `(tp, tn, fp, fn)` for one class by a single pixel loop.
pub fn brute_counts(pred: &LabelMap, truth: &LabelMap, class: u8) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    (tp, tn, fp, fn_)
}

fn frac(num: u64, den: u64) -> f64 {
    if den == 0 { 1.0 } else { num as f64 / den as f64 }
}

/// `(accuracy, sensitivity, specificity, dice)` from the textbook formulas.
pub fn brute_scores(pred: &LabelMap, truth: &LabelMap, class: u8) -> (f64, f64, f64, f64) {
    let (tp, tn, fp, fn_) = brute_counts(pred, truth, class);
    (frac(tp + tn, tp + tn + fp + fn_), frac(tp, tp + fn_), frac(tn, tn + fp), frac(2 * tp, 2 * tp + fp + fn_))
}

/// Region scores with sets built explicitly from pixel indices.
pub fn brute_region(pred: &LabelMap, truth: &LabelMap, labels: &[u8]) -> (f64, f64, f64) {
    let m1: Vec<usize> = (0..pred.len()).filter(|&i| labels.contains(&pred.data()[i])).collect();
    let n1: Vec<usize> = (0..truth.len()).filter(|&i| labels.contains(&truth.data()[i])).collect();
    let m0: Vec<usize> = (0..pred.len()).filter(|i| !m1.contains(i)).collect();
    let n0: Vec<usize> = (0..truth.len()).filter(|i| !n1.contains(i)).collect();
    let both1 = m1.iter().filter(|i| n1.contains(i)).count() as u64;
    let both0 = m0.iter().filter(|i| n0.contains(i)).count() as u64;
    let dice = if m1.is_empty() && n1.is_empty() {
        1.0
    } else {
        both1 as f64 / ((m1.len() + n1.len()) as f64 / 2.0)
    };
    (dice, frac(both1, n1.len() as u64), frac(both0, n0.len() as u64))
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
    conv(cin, cout, k) + 2 * cout
}

fn parts(cfg: &DtNetConfig, cin: usize, f: usize) -> usize {
    let part_in = if cfg.ablations.disable_mdic || cin % 4 != 0 { cin } else { cin / 4 };
    (0..4)
        .map(|p| match cfg.part_scheme {
            PartScheme::Single => conv_bn(part_in, f / 4, cfg.part_kernels[p]),
            PartScheme::MultiScale => cfg.part_kernels.iter().map(|&k| conv_bn(part_in, f / 4, k)).sum(),
        })
        .sum()
}

/// Trainable parameter total from the layer list alone.
pub fn closed_form_params(cfg: &DtNetConfig) -> usize {
    let enc = cfg.encoder_filters;
    let dec = cfg.decoder_filters;
    let mut total = 0;
    let mut cin = cfg.input_channels;
    for &f in &enc {
        total += conv_bn(cin, f, cfg.global_kernel) + parts(cfg, cin, f) + conv_bn(2 * f, f, 1) + conv_bn(f, f, 1);
        cin = f;
    }
    for &f in &dec {
        total += conv(cin, f, 1) + parts(cfg, cin, f) + conv_bn(2 * f, f, 1);
        cin = f;
    }
    total + conv(cin, cfg.num_classes, 1)
}

/// Running mean and variance of every normalization layer.
pub fn closed_form_non_trainable(cfg: &DtNetConfig) -> usize {
    let per_part = |_cin: usize, f: usize| match cfg.part_scheme {
        PartScheme::Single => 4 * 2 * (f / 4),
        PartScheme::MultiScale => 4 * 4 * 2 * (f / 4),
    };
    let mut total = 0;
    let mut cin = cfg.input_channels;
    for &f in &cfg.encoder_filters {
        total += 2 * f + per_part(cin, f) + 2 * f + 2 * f;
        cin = f;
    }
    for &f in &cfg.decoder_filters {
        total += per_part(cin, f) + 2 * f;
        cin = f;
    }
    total
}
