//! Adam, the training loop and infer-mode evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataio::dataset::hex;
use crate::dataio::dtt::encode;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::kernels::argmax_channels;
use crate::kv::KvDoc;
use crate::metrics::{aggregate, confusion_all, ConfusionCounts, Summary};
use crate::model::DtNet;
use crate::nn::{Mode, ParamStore, Session, BN_MOMENTUM};
use crate::tape::Tape;
use crate::tensor::{Element, Real, Tensor};

/// Steps after which every Adam update is expected to stay within `10 * lr`.
pub const ADAM_WARMUP_STEPS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments per parameter name, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    t: u64,
    moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, t: 0, moments: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// One update of every parameter in `grads`. Returns the largest absolute change applied.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<f64> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", self.t + 1)));
            }
            let shape = store.get(name)?.shape();
            if shape != g.shape() {
                return Err(Error::shape("adam_step", format!("`{name}` is {shape:?}, gradient {:?}", g.shape())));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        let mut max_update = 0f64;
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let mut theta = store.get(name)?.clone();
            for (((th, m), v), &g) in theta.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *th = *th - update;
                max_update = max_update.max(update.as_f64().abs());
            }
            store.set(name, theta)?;
        }
        Ok(max_update)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both initialization and per-epoch shuffling.
    pub seed: u64,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Also evaluate the training split after each epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, batch_size: 4, seed: 0, adam: AdamConfig::default(), checkpoint_every: 0, eval_train: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.adam.validate()
    }

    pub fn write_kv(&self, d: &mut KvDoc) {
        d.set("epochs", self.epochs)
            .set("batch_size", self.batch_size)
            .set("seed", self.seed)
            .set("lr", self.adam.lr)
            .set("beta1", self.adam.beta1)
            .set("beta2", self.adam.beta2)
            .set("adam_eps", self.adam.eps)
            .set("checkpoint_every", self.checkpoint_every)
            .set("eval_train", self.eval_train);
    }

    pub fn from_kv(d: &KvDoc) -> Result<Self> {
        let cfg = TrainConfig {
            epochs: d.parse("epochs")?,
            batch_size: d.parse("batch_size")?,
            seed: d.parse("seed")?,
            adam: AdamConfig {
                lr: d.parse("lr")?,
                beta1: d.parse("beta1")?,
                beta2: d.parse("beta2")?,
                eps: d.parse("adam_eps")?,
            },
            checkpoint_every: d.parse("checkpoint_every")?,
            eval_train: d.parse("eval_train")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Infer-mode loss and scores over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Pixel-mean cross-entropy.
    pub loss: f64,
    pub summary: Summary,
    pub per_image: Vec<Vec<ConfusionCounts>>,
}

impl Evaluation {
    pub fn brief(&self) -> EvalBrief {
        EvalBrief {
            loss: self.loss,
            mean_dice: self.summary.macro_foreground_dice(),
            micro_dice: self.summary.micro_foreground_dice(),
        }
    }
}

/// The per-epoch numbers kept in a [`TrainRun`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBrief {
    pub loss: f64,
    /// Macro-averaged foreground Dice.
    pub mean_dice: f64,
    pub micro_dice: f64,
}

fn check_data<T: Real>(model: &DtNet<T>, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if data.channels() != cfg.input_channels || data.size() != cfg.input_size {
        return Err(Error::shape(
            "train",
            format!(
                "data is {}x{}x{}, model expects {}x{}x{}",
                data.channels(),
                data.size(),
                data.size(),
                cfg.input_channels,
                cfg.input_size,
                cfg.input_size
            ),
        ));
    }
    if data.max_label() as usize >= cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "mask label {} outside 0..{}",
            data.max_label(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Scores `data` with normalization layers in inference mode.
pub fn evaluate<T: Real>(model: &DtNet<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    check_data(model, data)?;
    let k = model.config().num_classes;
    let s = data.size();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut per_image = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, model.store(), Mode::Infer);
        assert_eq!(sess.mode(), Mode::Infer, "evaluation must not run training-mode normalization");
        let xv = sess.tape.constant(x.cast());
        let logits = model.forward(&mut sess, xv)?;
        let loss = sess.tape.softmax_xent(logits, &y)?;
        loss_sum += tape.value(loss).data()[0].as_f64() * chunk.len() as f64;
        let pred = argmax_channels(tape.value(logits))?;
        for b in 0..chunk.len() {
            let p = Tensor::new(vec![s, s], pred.data()[b * s * s..(b + 1) * s * s].to_vec())?;
            let t = Tensor::new(vec![s, s], y.data()[b * s * s..(b + 1) * s * s].to_vec())?;
            per_image.push(confusion_all(&p, &t, k)?);
        }
    }
    Ok(Evaluation { loss: loss_sum / data.len() as f64, summary: aggregate(&per_image)?, per_image })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub train_eval: Option<EvalBrief>,
    pub test_eval: EvalBrief,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub config_digest: String,
    pub records: Vec<EpochRecord>,
    /// SHA-256 over the final parameters.
    pub param_digest: String,
    pub wall_time_secs: f64,
}

impl TrainRun {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("a run has at least one epoch")
    }

    /// Equal in every recorded number and in the final parameters; wall time is ignored.
    pub fn same_outcome(&self, other: &TrainRun) -> bool {
        self.seed == other.seed
            && self.config_digest == other.config_digest
            && self.param_digest == other.param_digest
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| record_bits(a) == record_bits(b))
    }

    /// `epoch,split,loss,mean_dice`: a `train` row (when evaluated) and a `test` row per epoch.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,mean_dice\n");
        for r in &self.records {
            if let Some(t) = &r.train_eval {
                let _ = writeln!(out, "{},train,{},{}", r.epoch, t.loss, t.mean_dice);
            }
            let _ = writeln!(out, "{},test,{},{}", r.epoch, r.test_eval.loss, r.test_eval.mean_dice);
        }
        out
    }
}

fn record_bits(r: &EpochRecord) -> Vec<u64> {
    let brief = |b: &EvalBrief| [b.loss.to_bits(), b.mean_dice.to_bits(), b.micro_dice.to_bits()];
    let mut v = vec![r.epoch as u64, r.train_loss.to_bits()];
    if let Some(t) = &r.train_eval {
        v.extend(brief(t));
    }
    v.extend(brief(&r.test_eval));
    v
}

pub fn param_digest<T: Real + Element>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, p) in store.iter() {
        h.update(name.as_bytes());
        h.update(encode(&p.value));
    }
    hex(&h.finalize())
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Optimizes `model` on `train` and scores `test` after every epoch.
///
/// Checkpoints go to `out/checkpoints/epoch_NNNN` when `out` is given and
/// `checkpoint_every > 0`. `observer` sees every finished epoch.
pub fn train<T: Real + Element>(
    model: &mut DtNet<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(model, train)?;
    check_data(model, test)?;
    let start = Instant::now();
    let mut adam = AdamState::new(cfg.adam);
    let momentum = T::from_f64(BN_MOMENTUM);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let (loss, grads, stats) = {
                let mut sess = Session::new(&mut tape, model.store(), Mode::Train);
                let xv = sess.tape.constant(x.cast());
                let logits = model.forward(&mut sess, xv)?;
                let l = sess.tape.softmax_xent(logits, &y)?;
                let loss = sess.tape.value(l).data()[0].as_f64();
                (loss, sess.param_grads(l)?, sess.take_batch_stats())
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let max_update = adam.step(model.store_mut(), &grads)?;
            debug_assert!(
                adam.steps() <= ADAM_WARMUP_STEPS || max_update <= 10.0 * cfg.adam.lr,
                "Adam update {max_update} exceeds 10 lr"
            );
            model.store_mut().apply_batch_stats(&stats, momentum)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_eval = if cfg.eval_train { Some(evaluate(model, train, cfg.batch_size)?.brief()) } else { None };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_eval,
            test_eval: evaluate(model, test, cfg.batch_size)?.brief(),
        };
        observer(&record);
        records.push(record);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                model.save(dir.join("checkpoints").join(format!("epoch_{epoch:04}")))?;
            }
        }
    }
    Ok(TrainRun {
        seed: cfg.seed,
        config_digest: model.config().digest(),
        records,
        param_digest: param_digest(model.store()),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], v), true).unwrap();
        s
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        IndexMap::from([("w".to_string(), Tensor::full(&[1], g))])
    }

    #[test]
    fn single_step_by_hand() {
        let mut s = store(0.0);
        let mut a = AdamState::new(AdamConfig::default());
        a.step(&mut s, &grads(1.0)).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(a.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store(0.5);
        let mut a = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            a.step(&mut s, &grads(0.0)).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.5);
        let (m, v) = a.moments("w").unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store(0.5);
        let mut a = AdamState::new(AdamConfig::default());
        let err = a.step(&mut s, &grads(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!((a.steps(), s.get("w").unwrap().data()[0]), (0, 0.5));
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch() {
        assert_eq!(shuffled(20, 1, 1), shuffled(20, 1, 1));
        assert_ne!(shuffled(20, 1, 1), shuffled(20, 1, 2));
        assert_ne!(shuffled(20, 1, 1), shuffled(20, 2, 1));
    }

    #[test]
    fn config_kv_roundtrip() {
        let c = TrainConfig { epochs: 3, seed: 9, eval_train: false, ..Default::default() };
        let mut d = KvDoc::new("t");
        c.write_kv(&mut d);
        assert_eq!(TrainConfig::from_kv(&d).unwrap(), c);
    }
}
