//! The finite-difference gradient suite: every differentiable operation and
//! module, checked in double precision on small random instances.
//!
//! Each check differentiates `sum(out ⊙ R)` for a fixed random `R`, which
//! keeps gradients informative where a plain sum would be degenerate (a
//! plain sum of a normalized output is constant).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::mdic::{DmModule, EmModule, MdicConfig, ThresholdSpec, ThresholdVariant};
use crate::model::{DtNet, DtNetConfig};
use crate::nn::{Mode, ParamStore, Session, BN_EPS};
use crate::tape::{BnMode, RunningStats, Tape, Var};
use crate::tensor::{FlipKind, Tensor};

pub const GROUPS: [&str; 13] = [
    "conv", "relu", "bn", "pool", "bilinear", "flip", "channels", "elementwise", "threshold", "xent", "em", "dm", "model",
];

/// Which checks to run: `all` or one group name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope(Option<String>);

impl Scope {
    pub fn all() -> Self {
        Scope(None)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope(None)),
            g if GROUPS.contains(&g) => Ok(Scope(Some(g.to_string()))),
            _ => Err(Error::Config(format!("unknown gradcheck scope `{s}` (all|{})", GROUPS.join("|")))),
        }
    }

    fn includes(&self, group: &str) -> bool {
        self.0.as_deref().is_none_or(|g| g == group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: String,
    pub report: GradcheckReport,
    pub seconds: f64,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Check {
    group: &'static str,
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: Objective,
    /// The whole network has kinks near almost every point; up to half of
    /// its probes may straddle one.
    kink_dense: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values kept at least `margin` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) { kink + m } else { kink - m }
    })
}

/// `sum(y ⊙ r)` for a random `r` drawn now and fixed for every evaluation.
fn weighted(rng: &mut ChaCha8Rng, shape: &[usize]) -> impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static {
    let r = uniform(rng, shape);
    move |t: &mut Tape<f64>, y: Var| {
        let rv = t.constant(r.clone());
        let p = t.mul(y, rv)?;
        t.sum(p)
    }
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut v = Vec::new();
    for k in [1usize, 3, 5] {
        let w_out = weighted(rng, &[2, 2, 5, 5]);
        v.push(Check {
            group: "conv",
            kink_dense: false,
            name: format!("conv2d k={k}"),
            inputs: vec![uniform(rng, &[2, 3, 5, 5]), uniform(rng, &[2, 3, k, k]), uniform(rng, &[2])],
            f: Box::new(move |t, x| {
                let y = t.conv2d(x[0], x[1], Some(x[2]))?;
                w_out(t, y)
            }),
        });
    }
    let w_out = weighted(rng, &[2, 3, 4, 4]);
    v.push(Check {
        group: "relu",
        kink_dense: false,
        name: "relu".into(),
        inputs: vec![away_from(rng, &[2, 3, 4, 4], 0.0, 0.01)],
        f: Box::new(move |t, x| {
            let y = t.relu(x[0])?;
            w_out(t, y)
        }),
    });
    let w_out = weighted(rng, &[2, 3, 3, 3]);
    v.push(Check {
        group: "bn",
        kink_dense: false,
        name: "batchnorm train".into(),
        inputs: vec![uniform(rng, &[2, 3, 3, 3]), uniform(rng, &[3]), uniform(rng, &[3])],
        f: Box::new(move |t, x| {
            let y = t.batchnorm(x[0], x[1], x[2], BnMode::Train, BN_EPS)?.0;
            w_out(t, y)
        }),
    });
    let rs = RunningStats { mean: uniform(rng, &[3]).into_data(), var: Tensor::random_uniform(&[3], 0.5, 2.0, rng).into_data() };
    let w_out = weighted(rng, &[2, 3, 3, 3]);
    v.push(Check {
        group: "bn",
        kink_dense: false,
        name: "batchnorm infer".into(),
        inputs: vec![uniform(rng, &[2, 3, 3, 3]), uniform(rng, &[3]), uniform(rng, &[3])],
        f: Box::new(move |t, x| {
            let y = t.batchnorm(x[0], x[1], x[2], BnMode::Infer(Some(&rs)), BN_EPS)?.0;
            w_out(t, y)
        }),
    });
    let w_out = weighted(rng, &[2, 2, 2, 3]);
    v.push(Check {
        group: "pool",
        kink_dense: false,
        name: "maxpool2".into(),
        inputs: vec![uniform(rng, &[2, 2, 4, 6])],
        f: Box::new(move |t, x| {
            let y = t.maxpool2(x[0])?;
            w_out(t, y)
        }),
    });
    let w_out = weighted(rng, &[1, 2, 6, 8]);
    v.push(Check {
        group: "bilinear",
        kink_dense: false,
        name: "bilinear_up2".into(),
        inputs: vec![uniform(rng, &[1, 2, 3, 4])],
        f: Box::new(move |t, x| {
            let y = t.bilinear_up2(x[0])?;
            w_out(t, y)
        }),
    });
    for kind in FlipKind::PART_ORDER {
        let w_out = weighted(rng, &[1, 2, 4, 4]);
        v.push(Check {
            group: "flip",
            kink_dense: false,
            name: format!("flip {}", kind.name()),
            inputs: vec![uniform(rng, &[1, 2, 4, 4])],
            f: Box::new(move |t, x| {
                let y = t.flip(x[0], kind)?;
                w_out(t, y)
            }),
        });
    }
    let w_out = weighted(rng, &[2, 8, 3, 3]);
    v.push(Check {
        group: "channels",
        kink_dense: false,
        name: "split4 / concat".into(),
        inputs: vec![uniform(rng, &[2, 8, 3, 3])],
        f: Box::new(move |t, x| {
            let [a, b, c, d] = t.split4(x[0])?;
            let y = t.concat_channels(&[d, b, a, c])?;
            w_out(t, y)
        }),
    });
    let w_out = weighted(rng, &[2, 3, 3, 3]);
    v.push(Check {
        group: "channels",
        kink_dense: false,
        name: "slice_channels".into(),
        inputs: vec![uniform(rng, &[2, 5, 3, 3])],
        f: Box::new(move |t, x| {
            let y = t.slice_channels(x[0], 1, 3)?;
            w_out(t, y)
        }),
    });
    let w_out = weighted(rng, &[2, 3]);
    v.push(Check {
        group: "elementwise",
        kink_dense: false,
        name: "add / mul".into(),
        inputs: vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])],
        f: Box::new(move |t, x| {
            let s = t.add(x[0], x[1])?;
            let y = t.mul(s, x[1])?;
            w_out(t, y)
        }),
    });
    for variant in [ThresholdVariant::Hard, ThresholdVariant::Epsilon] {
        let spec = ThresholdSpec::new(0.1, variant).expect("valid threshold");
        let w_out = weighted(rng, &[2, 3, 4, 4]);
        v.push(Check {
            group: "threshold",
            kink_dense: false,
            name: format!("threshold {}", variant.name()),
            inputs: vec![away_from(rng, &[2, 3, 4, 4], 0.1, 0.01)],
            f: Box::new(move |t, x| {
                let y = crate::mdic::threshold_conv_op(t, x[0], &spec)?;
                w_out(t, y)
            }),
        });
    }
    let labels = Tensor::from_fn(&[2, 2, 3], |_| rng.random_range(0..4u8));
    v.push(Check {
        group: "xent",
        kink_dense: false,
        name: "softmax_xent".into(),
        inputs: vec![Tensor::random_uniform(&[2, 4, 2, 3], -3.0, 3.0, rng)],
        f: Box::new(move |t, x| t.softmax_xent(x[0], &labels)),
    });
    v
}

/// Forward through `forward` with the selected trainable parameters of `store`
/// bound to checked inputs placed after the data inputs.
#[allow(clippy::too_many_arguments)]
fn module_check(
    group: &'static str,
    name: &str,
    store: ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    data: Vec<Tensor<f64>>,
    mode: Mode,
    objective: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
    forward: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Check {
    let names: Vec<String> = store.iter().filter(|(n, p)| p.trainable && select(n)).map(|(n, _)| n.to_string()).collect();
    let n_data = data.len();
    let mut inputs = data;
    inputs.extend(names.iter().map(|n| store.get(n).expect("registered").clone()));
    Check {
        group,
        kink_dense: false,
        name: name.to_string(),
        inputs,
        f: Box::new(move |t, x| {
            let y = {
                let mut s = Session::new(t, &store, mode);
                for (n, &var) in names.iter().zip(&x[n_data..]) {
                    s.bind(n.clone(), var);
                }
                forward(&mut s, &x[..n_data])?
            };
            objective(t, y)
        }),
    }
}

fn module_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut v = Vec::new();
    let threshold = ThresholdSpec::new(0.1, ThresholdVariant::Epsilon)?;
    let em = EmModule::new("em", MdicConfig::new(4, 4), Some(threshold))?;
    let mut store = ParamStore::new();
    em.register(&mut store, rng)?;
    let x = uniform(rng, &[1, 4, 8, 8]);
    let w_skip = weighted(rng, &[1, 4, 8, 8]);
    let w_pool = weighted(rng, &[1, 4, 4, 4]);
    v.push(module_check(
        "em",
        "em_forward",
        store,
        |_| true,
        vec![x],
        Mode::Train,
        |_, y| Ok(y),
        move |s, x| {
            let (skip, pooled) = em.forward(s, x[0])?;
            let a = w_skip(s.tape, skip)?;
            let b = w_pool(s.tape, pooled)?;
            s.tape.add(a, b)
        },
    ));

    let dm = DmModule::new("dm", MdicConfig::new(4, 4))?;
    let mut store = ParamStore::new();
    dm.register(&mut store, rng)?;
    let data = vec![uniform(rng, &[1, 4, 4, 4]), uniform(rng, &[1, 4, 8, 8])];
    v.push(module_check(
        "dm",
        "dm_forward",
        store,
        |_| true,
        data,
        Mode::Train,
        weighted(rng, &[1, 4, 8, 8]),
        move |s, x| dm.forward(s, x[0], Some(x[1])),
    ));

    // Inference mode without the threshold: train-mode normalization over the
    // 1x1 bottleneck and threshold jumps are covered by the checks above.
    let mut cfg = DtNetConfig { num_classes: 2, input_size: 32, ..Default::default() }.with_filters([4, 4, 4, 4, 4]);
    cfg.ablations.disable_threshold = true;
    let model = DtNet::<f64>::build(cfg, rng.random())?;
    let store = model.store().clone();
    let x = uniform(rng, &[4, 1, 32, 32]);
    let mut c = module_check(
        "model",
        "dtnet first and last layers",
        store,
        |n| n.starts_with("enc1/global/") || n.starts_with("head/"),
        Vec::new(),
        Mode::Infer,
        weighted(rng, &[4, 2, 32, 32]),
        move |s, _| {
            let xv = s.tape.constant(x.clone());
            model.forward(s, xv)
        },
    );
    c.kink_dense = true;
    v.push(c);
    Ok(v)
}

/// Runs every check in `scope` with central differences of step `eps`.
pub fn run_suite(scope: &Scope, eps: f64, tol: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = op_checks(&mut rng);
    checks.extend(module_checks(&mut rng)?);
    let mut out = Vec::new();
    for c in checks.into_iter().filter(|c| scope.includes(c.group)) {
        let start = Instant::now();
        let report = gradcheck(&c.f, &c.inputs, eps, tol)?;
        let passed = if c.kink_dense {
            report.max_rel_error < tol && 2 * report.nonsmooth < report.coordinates
        } else {
            report.passed
        };
        out.push(CheckResult { group: c.group, name: c.name, report, seconds: start.elapsed().as_secs_f64(), passed });
    }
    Ok(out)
}

/// `group,op,coordinates,nonsmooth,max_rel_error,max_abs_error,passed` table.
pub fn render_table(results: &[CheckResult]) -> String {
    let mut s = String::from("group,op,coordinates,nonsmooth,max_rel_error,max_abs_error,passed\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{:.3e},{:.3e},{}\n",
            r.group, r.name, r.report.coordinates, r.report.nonsmooth, r.report.max_rel_error, r.report.max_abs_error, r.passed
        ));
    }
    s
}
