//! Image/mask datasets and their tab-separated manifests.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::dtt::{dtt_read, dtt_write, encode};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// One image `[C,S,S]` with its label map `[S,S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMap,
}

impl Sample {
    fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(encode(&self.image));
        h.update(encode(&self.mask));
        h.finalize().into()
    }
}

/// Order-independent content hash of a sample collection, as lowercase hex.
pub fn digest_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> String {
    let mut hashes: Vec<[u8; 32]> = samples.into_iter().map(Sample::content_hash).collect();
    hashes.sort_unstable();
    let mut h = Sha256::new();
    for s in &hashes {
        h.update(s);
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    channels: usize,
    size: usize,
}

impl Dataset {
    /// Checks that every sample is square and shares channel count and size.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let (channels, size) = match first.image.shape() {
            [c, h, w] if h == w => (*c, *h),
            s => return Err(Error::shape("Dataset", format!("image must be [C,S,S], got {s:?}"))),
        };
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != [channels, size, size] || s.mask.shape() != [size, size] {
                return Err(Error::shape(
                    "Dataset",
                    format!(
                        "sample {i}: image {:?} / mask {:?}, expected [{channels},{size},{size}] / [{size},{size}]",
                        s.image.shape(),
                        s.mask.shape()
                    ),
                ));
            }
        }
        Ok(Dataset { samples, channels, size })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn digest(&self) -> String {
        digest_samples(&self.samples)
    }

    pub fn max_label(&self) -> u8 {
        self.samples.iter().flat_map(|s| s.mask.data().iter().copied()).max().unwrap_or(0)
    }

    /// First `n_train` samples and the remainder. Both halves must be non-empty.
    pub fn split_at(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} samples with {n_train} for training",
                self.len()
            )));
        }
        Ok((
            Dataset::new(self.samples[..n_train].to_vec())?,
            Dataset::new(self.samples[n_train..].to_vec())?,
        ))
    }

    pub fn split_fraction(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        self.split_at((self.len() as f64 * train_fraction).round() as usize)
    }

    /// Stack the selected samples into `[B,C,S,S]` images and `[B,S,S]` labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, LabelMap)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (c, s) = (self.channels, self.size);
        let mut images = Vec::with_capacity(indices.len() * c * s * s);
        let mut masks = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
            images.extend_from_slice(sample.image.data());
            masks.extend_from_slice(sample.mask.data());
        }
        let b = indices.len();
        Ok((Tensor::new(vec![b, c, s, s], images)?, Tensor::new(vec![b, s, s], masks)?))
    }

    /// Reads every pair listed in a manifest. Relative paths resolve against the manifest's directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let pairs = read_manifest(manifest)?;
        let samples = pairs
            .iter()
            .map(|(img, mask)| Ok(Sample { image: dtt_read(img)?, mask: dtt_read(mask)? }))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Writes `images/`, `masks/` and the manifest under `dir`; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        save_samples(&self.samples, dir.as_ref())
    }
}

pub(crate) fn save_samples(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("images/img_{i:05}.dtt");
        let mask = format!("masks/mask_{i:05}.dtt");
        dtt_write(&s.image, dir.join(&img))?;
        dtt_write(&s.mask, dir.join(&mask))?;
        lines.push_str(&format!("{img}\t{mask}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses `image<TAB>mask` lines, skipping blank lines. Every referenced file must exist.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img, mask) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected image<TAB>mask", lineno + 1)))?;
        let pair = (base.join(img.trim()), base.join(mask.trim()));
        for p in [&pair.0, &pair.1] {
            if !p.is_file() {
                return Err(Error::format(path, format!("line {}: missing file {}", lineno + 1, p.display())));
            }
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::format(path, "manifest lists no samples"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f32, l: u8) -> Sample {
        Sample { image: Tensor::full(&[1, 2, 2], v), mask: Tensor::full(&[2, 2], l) }
    }

    #[test]
    fn digest_ignores_order() {
        let a = Dataset::new(vec![sample(0.0, 0), sample(1.0, 1)]).unwrap();
        let b = Dataset::new(vec![sample(1.0, 1), sample(0.0, 0)]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), Dataset::new(vec![sample(0.0, 0)]).unwrap().digest());
    }

    #[test]
    fn rejects_mixed_shapes() {
        let odd = Sample { image: Tensor::zeros(&[2, 2, 2]), mask: Tensor::full(&[2, 2], 0) };
        assert!(Dataset::new(vec![sample(0.0, 0), odd]).is_err());
        assert!(Dataset::new(vec![]).is_err());
    }

    #[test]
    fn batch_and_split() {
        let d = Dataset::new((0..5).map(|i| sample(i as f32, i as u8)).collect()).unwrap();
        let (x, y) = d.batch(&[3, 1]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(x.data()[0], 3.0);
        assert_eq!(y.data()[4], 1);
        let (tr, te) = d.split_fraction(0.6).unwrap();
        assert_eq!((tr.len(), te.len()), (3, 2));
        assert!(d.split_at(5).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(vec![sample(0.5, 1), sample(0.25, 2)]).unwrap();
        let m = d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(&m).unwrap(), d);
        std::fs::remove_file(dir.path().join("masks/mask_00001.dtt")).unwrap();
        assert!(Dataset::load(&m).unwrap_err().to_string().contains("missing file"));
    }
}
