//! Binary PGM/PPM export for feature maps and label maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Real, Tensor};

/// Background black, then distinct colors per class.
pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 255, 255],
];

fn dims2<T: crate::tensor::Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::shape(op, format!("expected a 2-D map, got {s:?}"))),
    }
}

/// P5 bytes with min-max normalization to 0..=255. A constant map is mid-gray (128).
pub fn pgm_bytes<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = dims2(t, "export_pgm")?;
    let vals: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    if hi > lo {
        out.extend(vals.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8));
    } else {
        out.extend(std::iter::repeat_n(128u8, vals.len()));
    }
    Ok(out)
}

/// P6 bytes painting each label with its palette color.
pub fn ppm_bytes(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let (h, w) = dims2(labels, "export_ppm")?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &l in labels.data() {
        let rgb = palette
            .get(l as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} has no palette entry")))?;
        out.extend_from_slice(rgb);
    }
    Ok(out)
}

pub fn export_pgm<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, pgm_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn export_ppm(labels: &LabelMap, palette: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ppm_bytes(labels, palette)?).map_err(|e| Error::io(path, e))
}
