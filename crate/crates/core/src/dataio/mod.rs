//! File formats and datasets.

pub mod dataset;
pub mod dtt;
pub mod image;
pub mod synth;

pub use dataset::{Dataset, Sample};
pub use dtt::{dtt_read, dtt_read_any, dtt_write, AnyTensor};
pub use image::{export_pgm, export_ppm, pgm_bytes, ppm_bytes, DEFAULT_PALETTE};
pub use synth::{synth_generate, SynthSpec};
