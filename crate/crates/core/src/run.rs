//! Replayable training runs: everything needed to reproduce a run is written
//! to its manifest, and a manifest alone is enough to run it again.

use std::path::{Path, PathBuf};

use crate::dataio::synth::synth_dataset;
use crate::dataio::{Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::model::{DtNet, DtNetConfig};
use crate::train::{train, EpochRecord, TrainConfig, TrainRun};

pub const RUN_HEADER: &str = "dtnet-run-v1";
pub const RUN_MANIFEST: &str = "manifest.txt";
pub const CURVES_FILE: &str = "curves.csv";
pub const MODEL_DIR: &str = "model";

/// How a dataset is divided into training and test samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    /// The first `n` samples train.
    Count(usize),
    /// The first `round(len * f)` samples train.
    Fraction(f64),
}

impl Split {
    pub fn apply(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        match *self {
            Split::Count(n) => data.split_at(n),
            Split::Fraction(f) => data.split_fraction(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Manifest(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => synth_dataset(spec),
            DataSource::Manifest(p) => Dataset::load(p),
        }
    }

    fn write_kv(&self, d: &mut KvDoc) {
        match self {
            DataSource::Synthetic(s) => {
                d.set("data_source", "synthetic")
                    .set("synth_n_images", s.n_images)
                    .set("synth_size", s.size)
                    .set("synth_classes", s.n_classes)
                    .set("synth_channels", s.channels)
                    .set("synth_seed", s.seed)
                    .set("synth_noise", s.noise);
            }
            DataSource::Manifest(p) => {
                d.set("data_source", "manifest").set("data_manifest", p.display());
            }
        }
    }

    fn from_kv(d: &KvDoc) -> Result<Self> {
        match d.require("data_source")? {
            "synthetic" => Ok(DataSource::Synthetic(SynthSpec {
                n_images: d.parse("synth_n_images")?,
                size: d.parse("synth_size")?,
                n_classes: d.parse("synth_classes")?,
                channels: d.parse("synth_channels")?,
                seed: d.parse("synth_seed")?,
                noise: d.parse("synth_noise")?,
            })),
            "manifest" => Ok(DataSource::Manifest(PathBuf::from(d.require("data_manifest")?))),
            other => Err(Error::Config(format!("unknown data_source `{other}`"))),
        }
    }
}

/// Model, optimization and data settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub model: DtNetConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: Split,
}

/// Datasets after loading and splitting, with their digests.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub dataset_digest: String,
}

impl PreparedData {
    pub fn new(all: &Dataset, split: Split) -> Result<Self> {
        let (train, test) = split.apply(all)?;
        Ok(PreparedData { train, test, dataset_digest: all.digest() })
    }
}

/// A finished run and the manifest written for it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: TrainRun,
    pub manifest: KvDoc,
    pub params: usize,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Setup keys only; results are appended by [`RunSetup::execute_with`].
    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new(RUN_HEADER);
        d.set("command", "train");
        self.model.write_kv(&mut d);
        self.train.write_kv(&mut d);
        self.data.write_kv(&mut d);
        match self.split {
            Split::Count(n) => d.set("split_train_count", n),
            Split::Fraction(f) => d.set("split_train_fraction", f),
        };
        d
    }

    pub fn from_kv(d: &KvDoc) -> Result<Self> {
        let split = match (d.get("split_train_count"), d.get("split_train_fraction")) {
            (Some(_), None) => Split::Count(d.parse("split_train_count")?),
            (None, Some(_)) => Split::Fraction(d.parse("split_train_fraction")?),
            _ => return Err(Error::Config("exactly one of split_train_count / split_train_fraction required".into())),
        };
        let setup = RunSetup {
            model: DtNetConfig::from_kv(d)?,
            train: TrainConfig::from_kv(d)?,
            data: DataSource::from_kv(d)?,
            split,
        };
        setup.validate()?;
        Ok(setup)
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        PreparedData::new(&self.data.load()?, self.split)
    }

    /// Loads the data and runs. See [`RunSetup::execute_with`].
    pub fn execute(&self, out: Option<&Path>, observer: impl FnMut(&EpochRecord)) -> Result<RunOutcome> {
        self.execute_with(&self.prepare()?, out, observer)
    }

    /// Builds the model from the run seed and trains it. With `out`, writes
    /// the manifest, the curve CSV and the final model archive there.
    pub fn execute_with(&self, data: &PreparedData, out: Option<&Path>, observer: impl FnMut(&EpochRecord)) -> Result<RunOutcome> {
        self.validate()?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut model = DtNet::<f32>::build(self.model.clone(), self.train.seed)?;
        let params = model.count_params().trainable;
        let run = train(&mut model, &data.train, &data.test, &self.train, out, observer)?;
        let mut manifest = self.to_kv();
        let last = run.last();
        manifest
            .set("config_digest", &run.config_digest)
            .set("dataset_digest", &data.dataset_digest)
            .set("train_digest", data.train.digest())
            .set("test_digest", data.test.digest())
            .set("trainable_params", params)
            .set("epochs_completed", run.epochs())
            .set("final_train_loss", last.train_loss)
            .set("final_test_loss", last.test_eval.loss)
            .set("final_test_mean_dice", last.test_eval.mean_dice)
            .set("final_test_micro_dice", last.test_eval.micro_dice)
            .set("param_digest", &run.param_digest)
            .set("wall_time_secs", format!("{:.3}", run.wall_time_secs));
        if let Some(dir) = out {
            let curves = dir.join(CURVES_FILE);
            std::fs::write(&curves, run.curves_csv()).map_err(|e| Error::io(&curves, e))?;
            model.save(dir.join(MODEL_DIR))?;
            manifest.write(dir.join(RUN_MANIFEST))?;
        }
        Ok(RunOutcome { run, manifest, params })
    }
}

/// Re-runs the run recorded in `manifest`, refusing if the data no longer
/// hashes to the recorded digest.
pub fn replay(manifest: &KvDoc, out: Option<&Path>, observer: impl FnMut(&EpochRecord)) -> Result<RunOutcome> {
    let setup = RunSetup::from_kv(manifest)?;
    let data = setup.prepare()?;
    if let Some(expected) = manifest.get("dataset_digest") {
        if expected != data.dataset_digest {
            return Err(Error::Config(format!(
                "dataset digest {} does not match the manifest's {expected}",
                data.dataset_digest
            )));
        }
    }
    setup.execute_with(&data, out, observer)
}
