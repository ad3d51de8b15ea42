//! Comparative experiments: threshold sweeps and the strategy ablations.
//!
//! Every run gets its own directory holding the usual run outputs, and a
//! summary CSV is written at the top level.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdic::{ThresholdSpec, ThresholdVariant};
use crate::model::DtNetConfig;
use crate::run::{PreparedData, RunSetup, CURVES_FILE};
use crate::train::{EpochRecord, TrainRun};

pub const SWEEP_SUMMARY: &str = "sweep.csv";
pub const ABLATION_SUMMARY: &str = "ablation.csv";

/// A sweep point: a threshold value, or no threshold layer at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSetting {
    Disabled,
    Value(f64),
}

impl ThresholdSetting {
    /// `off`, `disabled`, `none` and `0` select [`ThresholdSetting::Disabled`].
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if matches!(s, "off" | "disabled" | "none") {
            return Ok(ThresholdSetting::Disabled);
        }
        let v: f64 = s.parse().map_err(|_| Error::Config(format!("bad threshold `{s}`")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("threshold {v} must be finite and >= 0")));
        }
        Ok(if v == 0.0 { ThresholdSetting::Disabled } else { ThresholdSetting::Value(v) })
    }

    pub fn label(&self) -> String {
        match self {
            ThresholdSetting::Disabled => "disabled".into(),
            ThresholdSetting::Value(v) => format!("t{v}"),
        }
    }
}

/// One finished run of a comparative experiment.
#[derive(Debug, Clone)]
pub struct HarnessEntry {
    /// Row name in the summary table.
    pub name: String,
    /// Directory name under the experiment output.
    pub slug: String,
    pub config: DtNetConfig,
    pub params: usize,
    pub run: TrainRun,
}

fn run_variant(
    base: &RunSetup,
    data: &PreparedData,
    name: String,
    slug: String,
    config: DtNetConfig,
    out: &Path,
    observer: &mut impl FnMut(&str, &EpochRecord),
) -> Result<HarnessEntry> {
    let setup = RunSetup { model: config.clone(), ..base.clone() };
    let dir = out.join(&slug);
    let outcome = setup.execute_with(data, Some(&dir), |r| observer(&name, r))?;
    Ok(HarnessEntry { name, slug, config, params: outcome.params, run: outcome.run })
}

/// One run per threshold setting and variant; a disabled setting runs once.
pub fn threshold_sweep(
    base: &RunSetup,
    settings: &[ThresholdSetting],
    variants: &[ThresholdVariant],
    out: &Path,
    mut observer: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<HarnessEntry>> {
    if settings.is_empty() || variants.is_empty() {
        return Err(Error::Config("sweep needs at least one threshold and one variant".into()));
    }
    let data = base.prepare()?;
    let mut plan = Vec::new();
    for s in settings {
        match *s {
            ThresholdSetting::Disabled => {
                let mut c = base.model.clone();
                c.ablations.disable_threshold = true;
                plan.push((s.label(), c));
            }
            ThresholdSetting::Value(t) => {
                for &v in variants {
                    let mut c = base.model.clone();
                    c.ablations.disable_threshold = false;
                    c.threshold = ThresholdSpec { threshold: t, variant: v, epsilon: base.model.threshold.epsilon };
                    plan.push((format!("{}-{}", s.label(), v.name()), c));
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(plan.len());
    for (label, config) in plan {
        entries.push(run_variant(base, &data, label.clone(), label, config, out, &mut observer)?);
    }
    let mut csv = String::from("run,threshold,variant,params,final_train_loss,final_test_loss,final_test_mean_dice,curves\n");
    for e in &entries {
        let (t, v) = if e.config.ablations.disable_threshold {
            ("disabled".to_string(), "none")
        } else {
            (e.config.threshold.threshold.to_string(), e.config.threshold.variant.name())
        };
        let last = e.run.last();
        let _ = writeln!(
            csv,
            "{},{t},{v},{},{},{},{},{}/{CURVES_FILE}",
            e.name, e.params, last.train_loss, last.test_eval.loss, last.test_eval.mean_dice, e.slug
        );
    }
    write(out, SWEEP_SUMMARY, &csv)?;
    Ok(entries)
}

/// The six strategy variants as `(table name, slug, config)`.
pub fn ablation_variants(base: &DtNetConfig) -> Vec<(&'static str, &'static str, DtNetConfig)> {
    let with = |f: &dyn Fn(&mut DtNetConfig)| {
        let mut c = base.clone();
        c.ablations = Default::default();
        f(&mut c);
        c
    };
    vec![
        ("DT-Net", "full", with(&|_| {})),
        ("DT-Net-no-1", "no-1", with(&|c| c.ablations.disable_mdic = true)),
        ("DT-Net-no-2", "no-2", with(&|c| c.ablations.disable_threshold = true)),
        ("DT-Net-no-3", "no-3", with(&|c| c.ablations.disable_skip = true)),
        (
            "DT-Net-no-1-2",
            "no-1-2",
            with(&|c| {
                c.ablations.disable_mdic = true;
                c.ablations.disable_threshold = true;
            }),
        ),
        ("DT-Net-*", "hard", with(&|c| c.threshold.variant = ThresholdVariant::Hard)),
    ]
}

pub fn ablation_suite(base: &RunSetup, out: &Path, mut observer: impl FnMut(&str, &EpochRecord)) -> Result<Vec<HarnessEntry>> {
    let data = base.prepare()?;
    let mut entries = Vec::with_capacity(6);
    for (name, slug, config) in ablation_variants(&base.model) {
        entries.push(run_variant(base, &data, name.into(), slug.into(), config, out, &mut observer)?);
    }
    let mut csv = String::from(
        "variant,params,final_train_loss,final_test_loss,final_test_mean_dice,final_test_micro_dice,curves\n",
    );
    for e in &entries {
        let last = e.run.last();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}/{CURVES_FILE}",
            e.name,
            e.params,
            last.train_loss,
            last.test_eval.loss,
            last.test_eval.mean_dice,
            last.test_eval.micro_dice,
            e.slug
        );
    }
    write(out, ABLATION_SUMMARY, &csv)?;
    Ok(entries)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_parse() {
        assert_eq!(ThresholdSetting::parse("0").unwrap(), ThresholdSetting::Disabled);
        assert_eq!(ThresholdSetting::parse("off").unwrap(), ThresholdSetting::Disabled);
        assert_eq!(ThresholdSetting::parse("0.3").unwrap(), ThresholdSetting::Value(0.3));
        assert!(ThresholdSetting::parse("-1").is_err());
        assert!(ThresholdSetting::parse("x").is_err());
        assert_eq!(ThresholdSetting::Value(0.1).label(), "t0.1");
    }

    #[test]
    fn six_distinct_variants() {
        let v = ablation_variants(&DtNetConfig::default());
        assert_eq!(v.len(), 6);
        let full = &v[0].2;
        assert_eq!(v[2].2.threshold, full.threshold);
        assert!(v[2].2.ablations.disable_threshold);
        assert_eq!(v[5].2.threshold.variant, ThresholdVariant::Hard);
    }
}
