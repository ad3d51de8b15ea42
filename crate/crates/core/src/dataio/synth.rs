//! Seeded synthetic shapes corpus.
//!
//! Foreground class `c` (1-based) is drawn as an ellipse when `c` is odd and
//! as an axis-aligned rectangle when even, filled with an intensity from its
//! own band, on a zero background with additive Gaussian noise. Each
//! foreground class is present in an image with probability
//! [`CLASS_PRESENCE`]; an image that would be empty gets one class at random.
//! Shapes never touch, so each labelled pixel belongs to exactly one shape.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{digest_samples, save_samples, Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const CLASS_PRESENCE: f64 = 0.9;
const BAND_LO: f64 = 0.3;
const BAND_HI: f64 = 0.9;
const BAND_HALF_WIDTH: f64 = 0.03;
const MIN_BAND_SPACING: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_images: usize,
    pub size: usize,
    /// Background plus foreground classes.
    pub n_classes: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the additive noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_images: 200, size: 64, n_classes: 5, channels: 1, seed: 0, noise: 0.05 }
    }
}

impl SynthSpec {
    /// Most classes whose intensity bands stay [`MIN_BAND_SPACING`] apart.
    pub fn max_classes() -> usize {
        1 + ((BAND_HI - BAND_LO) / MIN_BAND_SPACING).floor() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be positive".into()));
        }
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!("size {} is not a positive multiple of 32", self.size)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes {} < 2", self.n_classes)));
        }
        if self.n_classes > Self::max_classes() {
            return Err(Error::Config(format!(
                "n_classes {} exceeds the {} distinguishable intensity bands",
                self.n_classes,
                Self::max_classes()
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be finite and non-negative", self.noise)));
        }
        Ok(())
    }

    fn foreground(&self) -> usize {
        self.n_classes - 1
    }

    /// Center of the intensity band of `class` in `channel`. Channels permute the bands.
    pub fn band_center(&self, class: u8, channel: usize) -> f64 {
        let k = self.foreground();
        if k == 1 {
            return (BAND_LO + BAND_HI) / 2.0;
        }
        let slot = (class as usize - 1 + channel) % k;
        BAND_LO + (BAND_HI - BAND_LO) * slot as f64 / (k - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        if class % 2 == 1 { ShapeKind::Ellipse } else { ShapeKind::Rectangle }
    }
}

/// An axis-aligned shape in pixel coordinates; pixel `(i, j)` is sampled at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Shape {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let dy = (i as f64 + 0.5 - self.cy) / self.ry;
        let dx = (j as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }

    fn clear_of(&self, other: &Shape, gap: f64) -> bool {
        (self.cy - other.cy).abs() > self.ry + other.ry + gap || (self.cx - other.cx).abs() > self.rx + other.rx + gap
    }
}

/// One generated image along with the shapes that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub sample: Sample,
    pub shapes: Vec<Shape>,
    pub intensities: Vec<f64>,
}

/// Per-image generator seeded from `(seed, index)`.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn place(spec: &SynthSpec, class: u8, placed: &[Shape], rng: &mut ChaCha8Rng) -> Option<Shape> {
    let s = spec.size as f64;
    let (rmin, rmax) = (s / 12.0, s / 6.0);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let ry = rng.random_range(rmin..rmax);
        let rx = rng.random_range(rmin..rmax);
        let cy = rng.random_range(ry + 1.0..s - ry - 1.0);
        let cx = rng.random_range(rx + 1.0..s - rx - 1.0);
        let shape = Shape { class, kind: ShapeKind::for_class(class), cy, cx, ry, rx };
        if placed.iter().all(|p| shape.clear_of(p, 2.0)) {
            return Some(shape);
        }
    }
    None
}

/// Generates image `index` of the corpus described by `spec`.
pub fn synth_image(spec: &SynthSpec, index: usize) -> Result<SynthImage> {
    spec.validate()?;
    let mut rng = image_rng(spec.seed, index);
    let k = spec.foreground();
    let mut classes: Vec<u8> = (1..=k as u8).filter(|_| rng.random_bool(CLASS_PRESENCE)).collect();
    if classes.is_empty() {
        classes.push(rng.random_range(1..=k as u8));
    }
    let mut shapes = Vec::with_capacity(classes.len());
    let mut intensities = Vec::with_capacity(classes.len());
    for &c in &classes {
        if let Some(shape) = place(spec, c, &shapes, &mut rng) {
            shapes.push(shape);
            intensities.push(rng.random_range(-BAND_HALF_WIDTH..BAND_HALF_WIDTH));
        }
    }
    if shapes.is_empty() {
        return Err(Error::Config(format!("could not place any shape in a {0}x{0} image", spec.size)));
    }

    let s = spec.size;
    let mut mask = vec![0u8; s * s];
    for shape in &shapes {
        for i in 0..s {
            for j in 0..s {
                if shape.contains(i, j) {
                    mask[i * s + j] = shape.class;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = vec![0f32; spec.channels * s * s];
    for ch in 0..spec.channels {
        let levels: Vec<f64> = std::iter::once(0.0)
            .chain((1..=k as u8).map(|c| {
                let offset = shapes.iter().position(|sh| sh.class == c).map_or(0.0, |p| intensities[p]);
                spec.band_center(c, ch) + offset
            }))
            .collect();
        for (p, &label) in mask.iter().enumerate() {
            image[ch * s * s + p] = (levels[label as usize] + noise.sample(&mut rng)) as f32;
        }
    }
    Ok(SynthImage {
        sample: Sample {
            image: Tensor::new(vec![spec.channels, s, s], image)?,
            mask: Tensor::new(vec![s, s], mask)?,
        },
        shapes,
        intensities,
    })
}

/// The whole corpus in memory, generated in parallel over images.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let images = exec::try_map_indexed(spec.n_images, |i| synth_image(spec, i))?;
    Dataset::new(images.into_iter().map(|im| im.sample).collect())
}

/// Paths and digest of a corpus written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub digest: String,
    pub n_images: usize,
}

/// Writes the corpus under `out_dir` and a `digest.txt` next to the manifest.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    let out_dir = out_dir.as_ref();
    let dataset = synth_dataset(spec)?;
    let manifest = save_samples(dataset.samples(), out_dir)?;
    let digest = digest_samples(dataset.samples());
    let digest_path = out_dir.join("digest.txt");
    std::fs::write(&digest_path, format!("{digest}\n")).map_err(|e| Error::io(&digest_path, e))?;
    Ok(SynthOutput { manifest, digest, n_images: dataset.len() })
}
