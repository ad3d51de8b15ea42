//! Flag groups shared by several subcommands.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dtnet_core::dataio::{Dataset, SynthSpec};
use dtnet_core::harness::ThresholdSetting;
use dtnet_core::mdic::{PartScheme, ThresholdVariant, DEFAULT_EPSILON};
use dtnet_core::model::{Ablations, DtNetConfig, DEPTH};
use dtnet_core::run::{DataSource, RunSetup, Split};
use dtnet_core::train::{AdamConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Hard,
    #[value(alias = "epsilon")]
    Eps,
}

impl From<VariantArg> for ThresholdVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Hard => ThresholdVariant::Hard,
            VariantArg::Eps => ThresholdVariant::Epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Single,
    Multiscale,
}

impl From<SchemeArg> for PartScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Single => PartScheme::Single,
            SchemeArg::Multiscale => PartScheme::MultiScale,
        }
    }
}

/// Architecture flags.
#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Encoder filter counts, five values, each a multiple of 4.
    #[arg(long, value_delimiter = ',', default_value = "24,48,96,192,192")]
    pub filters: Vec<usize>,
    /// Part kernel sizes, four odd values.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    pub kernels: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub global_kernel: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Multiscale)]
    pub part_scheme: SchemeArg,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Disable MDIC: no channel split, no flips.
    #[arg(long)]
    pub no_mdic: bool,
}

impl ArchArgs {
    pub fn config(&self, channels: usize, size: usize) -> Result<DtNetConfig, CliError> {
        let filters: [usize; DEPTH] = self
            .filters
            .clone()
            .try_into()
            .map_err(|v: Vec<usize>| CliError::Usage(format!("--filters needs {DEPTH} values, got {}", v.len())))?;
        let kernels: [usize; 4] = self
            .kernels
            .clone()
            .try_into()
            .map_err(|v: Vec<usize>| CliError::Usage(format!("--kernels needs 4 values, got {}", v.len())))?;
        let cfg = DtNetConfig {
            num_classes: self.classes,
            input_channels: channels,
            input_size: size,
            part_kernels: kernels,
            global_kernel: self.global_kernel,
            part_scheme: self.part_scheme.into(),
            ablations: Ablations { disable_mdic: self.no_mdic, ..Default::default() },
            ..Default::default()
        }
        .with_filters(filters);
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset manifest (`image<TAB>mask` lines).
    #[arg(long, conflicts_with = "synth_n", required_unless_present = "synth_n")]
    pub data: Option<PathBuf>,
    /// Generate a synthetic corpus of this many images in memory instead.
    #[arg(long)]
    pub synth_n: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "synth_n")]
    pub synth_seed: u64,
    #[arg(long, default_value_t = 0.05, requires = "synth_n")]
    pub synth_noise: f64,
    #[arg(long, default_value_t = 1, requires = "synth_n")]
    pub synth_channels: usize,
    /// Training images: a count (`200`) or a fraction (`0.6`).
    #[arg(long, default_value = "0.6")]
    pub split: String,
}

impl DataArgs {
    pub fn split(&self) -> Result<Split, CliError> {
        let s = self.split.trim();
        if let Ok(n) = s.parse::<usize>() {
            return if n == 0 { Err(CliError::Usage("--split count must be >= 1".into())) } else { Ok(Split::Count(n)) };
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f < 1.0 => Ok(Split::Fraction(f)),
            _ => Err(CliError::Usage(format!("--split `{s}` is neither a count nor a fraction in (0, 1)"))),
        }
    }

    /// The data source, resolving a manifest to an absolute path so the run
    /// manifest replays from any directory.
    pub fn source(&self, size: usize, classes: usize) -> Result<DataSource, CliError> {
        match (&self.data, self.synth_n) {
            (Some(p), _) => {
                let abs = std::fs::canonicalize(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Ok(DataSource::Manifest(abs))
            }
            (None, Some(n)) => {
                let spec = SynthSpec {
                    n_images: n,
                    size,
                    n_classes: classes,
                    channels: self.synth_channels,
                    seed: self.synth_seed,
                    noise: self.synth_noise,
                };
                spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(DataSource::Synthetic(spec))
            }
            (None, None) => Err(CliError::Usage("one of --data or --synth-n is required".into())),
        }
    }
}

/// Everything `train`, `threshold-sweep` and `ablate` share.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Threshold T; `off` (or 0) disables threshold convolution.
    #[arg(long, default_value = "0.1")]
    pub threshold: String,
    #[arg(long, value_enum, default_value_t = VariantArg::Eps)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Input side length.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Take the input side length from the dataset; an optional value is the
    /// side length the data must have.
    #[arg(long, num_args = 0..=1, value_name = "EXPECT")]
    pub size_from_data: Option<Option<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_threshold: bool,
    /// Replace decoder skips with zeros.
    #[arg(long)]
    pub no_skip: bool,
    /// Save a checkpoint every N epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Skip the per-epoch evaluation of the training split.
    #[arg(long)]
    pub no_train_eval: bool,
}

impl TrainArgs {
    /// Resolves every flag into a validated setup, reading the dataset only
    /// when its shape is needed.
    pub fn setup(&self) -> Result<RunSetup, CliError> {
        let split = self.data.split()?;
        let setting = if self.no_threshold {
            ThresholdSetting::Disabled
        } else {
            ThresholdSetting::parse(&self.threshold).map_err(|e| CliError::Usage(e.to_string()))?
        };
        let (size, channels, data) = match (&self.data.data, self.size_from_data) {
            (Some(p), Some(expect)) => {
                let ds = Dataset::load(p)?;
                if let Some(e) = expect.filter(|&e| e != ds.size()) {
                    return Err(CliError::Validation(format!("data side length is {}, expected {e}", ds.size())));
                }
                (ds.size(), ds.channels(), self.data.source(ds.size(), self.arch.classes)?)
            }
            (Some(p), None) => (self.size, Dataset::load(p)?.channels(), self.data.source(self.size, self.arch.classes)?),
            (None, from_data) => {
                let size = from_data.flatten().unwrap_or(self.size);
                (size, self.data.synth_channels, self.data.source(size, self.arch.classes)?)
            }
        };
        let mut model = self.arch.config(channels, size)?;
        match setting {
            ThresholdSetting::Disabled => model.ablations.disable_threshold = true,
            ThresholdSetting::Value(t) => model.threshold.threshold = t,
        }
        model.threshold.variant = self.variant.into();
        model.threshold.epsilon = self.epsilon;
        model.threshold.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        model.ablations.disable_skip = self.no_skip;
        let train = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..Default::default() },
            checkpoint_every: self.checkpoint_every,
            eval_train: !self.no_train_eval,
        };
        let setup = RunSetup { model, train, data, split };
        setup.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(setup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data_args(split: &str) -> DataArgs {
        DataArgs { data: None, synth_n: Some(10), synth_seed: 0, synth_noise: 0.05, synth_channels: 1, split: split.into() }
    }

    #[test]
    fn split_accepts_counts_and_fractions() {
        assert_eq!(data_args("7").split().unwrap(), Split::Count(7));
        assert_eq!(data_args("0.6").split().unwrap(), Split::Fraction(0.6));
        for bad in ["0", "1.0", "-0.2", "half"] {
            assert!(matches!(data_args(bad).split(), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn arch_rejects_wrong_lengths() {
        let arch = ArchArgs {
            filters: vec![8, 16, 32, 64, 64],
            kernels: vec![1, 3, 5],
            global_kernel: 3,
            part_scheme: SchemeArg::Multiscale,
            classes: 5,
            no_mdic: false,
        };
        assert!(matches!(arch.config(1, 64), Err(CliError::Usage(_))));
        let ok = ArchArgs { kernels: vec![1, 3, 5, 7], ..arch };
        assert_eq!(ok.config(1, 64).unwrap().input_size, 64);
    }
}
