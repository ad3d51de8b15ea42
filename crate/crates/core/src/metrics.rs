//! One-vs-rest confusion counts and the segmentation scores built on them.
//!
//! Empty-set conventions: a ratio whose denominator is zero scores 1, so a
//! class absent from both prediction and truth is a perfect result.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 1.0 } else { num as f64 / den as f64 }
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn scores(&self) -> ClassScores {
        ClassScores {
            accuracy: self.accuracy(),
            sensitivity: self.sensitivity(),
            specificity: self.specificity(),
            dice: self.dice(),
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub dice: f64,
}

impl ClassScores {
    fn mean(items: &[ClassScores]) -> ClassScores {
        let n = items.len() as f64;
        let sum = |f: fn(&ClassScores) -> f64| items.iter().map(f).sum::<f64>() / n;
        ClassScores {
            accuracy: sum(|s| s.accuracy),
            sensitivity: sum(|s| s.sensitivity),
            specificity: sum(|s| s.specificity),
            dice: sum(|s| s.dice),
        }
    }
}

fn check_pair(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("confusion", format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    if let Some(&l) = pred.data().iter().chain(truth.data()).find(|&&l| l as usize >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {l} outside 0..{num_classes}")));
    }
    Ok(())
}

/// Counts for `class_id` against all other labels.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, class_id: u8, num_classes: usize) -> Result<ConfusionCounts> {
    check_pair(pred, truth, num_classes)?;
    if class_id as usize >= num_classes {
        return Err(Error::InvalidArgument(format!("class {class_id} outside 0..{num_classes}")));
    }
    Ok(binary_counts(pred, truth, |l| l == class_id))
}

fn binary_counts(pred: &LabelMap, truth: &LabelMap, inside: impl Fn(u8) -> bool) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (inside(p), inside(t)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Counts for every class `0..num_classes`.
pub fn confusion_all(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<Vec<ConfusionCounts>> {
    check_pair(pred, truth, num_classes)?;
    let mut counts = vec![ConfusionCounts::default(); num_classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if p == t {
            counts[p as usize].tp += 1;
        } else {
            counts[p as usize].fp += 1;
            counts[t as usize].fn_ += 1;
        }
    }
    let total = pred.len() as u64;
    for c in &mut counts {
        c.tn = total - c.tp - c.fp - c.fn_;
    }
    Ok(counts)
}

/// A named union of ground-truth labels scored as one foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSpec {
    pub name: String,
    pub labels: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("region label set is empty".into()));
        }
        Ok(RegionSpec { name: name.into(), labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScores {
    pub dice_plus: f64,
    pub sens_plus: f64,
    pub spec_plus: f64,
}

/// Binarize prediction `M` and truth `N` by region membership, then
/// `Dice+ = |M1∧N1| / ((|M1|+|N1|)/2)`, `Sens+ = |M1∧N1| / |N1|`, `Spec+ = |M0∧N0| / |N0|`.
pub fn region_scores(pred: &LabelMap, truth: &LabelMap, region: &RegionSpec, num_classes: usize) -> Result<RegionScores> {
    check_pair(pred, truth, num_classes)?;
    if let Some(&l) = region.labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::InvalidArgument(format!("region `{}` label {l} outside 0..{num_classes}", region.name)));
    }
    let c = binary_counts(pred, truth, |l| region.labels.contains(&l));
    let (m1, n1, n0) = (c.tp + c.fp, c.tp + c.fn_, c.tn + c.fp);
    let dice_plus = if m1 + n1 == 0 { 1.0 } else { c.tp as f64 / ((m1 + n1) as f64 / 2.0) };
    Ok(RegionScores { dice_plus, sens_plus: ratio(c.tp, n1), spec_plus: ratio(c.tn, n0) })
}

/// Per-class scores under both aggregation schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Scores of the confusion counts summed over images.
    pub micro: Vec<ClassScores>,
    /// Per-image scores averaged over images.
    pub macro_: Vec<ClassScores>,
}

impl Summary {
    /// Macro-averaged Dice over the foreground classes `1..`.
    pub fn macro_foreground_dice(&self) -> f64 {
        mean_dice(&self.macro_[1..])
    }

    pub fn micro_foreground_dice(&self) -> f64 {
        mean_dice(&self.micro[1..])
    }
}

fn mean_dice(s: &[ClassScores]) -> f64 {
    s.iter().map(|c| c.dice).sum::<f64>() / s.len() as f64
}

/// `per_image[i][c]` holds image `i`'s counts for class `c`.
pub fn aggregate(per_image: &[Vec<ConfusionCounts>]) -> Result<Summary> {
    let first = per_image.first().ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty batch".into()))?;
    let k = first.len();
    if k == 0 || per_image.iter().any(|v| v.len() != k) {
        return Err(Error::InvalidArgument("images disagree on class count".into()));
    }
    let micro = (0..k).map(|c| per_image.iter().map(|v| v[c]).sum::<ConfusionCounts>().scores()).collect();
    let macro_ = (0..k)
        .map(|c| ClassScores::mean(&per_image.iter().map(|v| v[c].scores()).collect::<Vec<_>>()))
        .collect();
    Ok(Summary { micro, macro_ })
}

/// CSV report: a per-class table, then an optional region table.
pub fn render_csv(class_rows: &[(String, ClassScores)], regions: &[(RegionSpec, RegionScores)]) -> String {
    let mut out = String::from("class,accuracy,sensitivity,specificity,dice\n");
    for (name, s) in class_rows {
        let _ = writeln!(out, "{name},{},{},{},{}", s.accuracy, s.sensitivity, s.specificity, s.dice);
    }
    if !regions.is_empty() {
        out.push_str("\nregion,labels,dice_plus,sens_plus,spec_plus\n");
        for (r, s) in regions {
            let labels: Vec<String> = r.labels.iter().map(u8::to_string).collect();
            let _ = writeln!(out, "{},{},{},{},{}", r.name, labels.join(" "), s.dice_plus, s.sens_plus, s.spec_plus);
        }
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, class_rows: &[(String, ClassScores)], regions: &[(RegionSpec, RegionScores)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_csv(class_rows, regions)).map_err(|e| Error::io(path, e))
}
