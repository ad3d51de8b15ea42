//! DT-Net: an encoder/decoder segmentation network built from
//! multi-directional integrated convolution (MDIC) and threshold convolution,
//! with its own tensor engine, gradient tape, metrics, training loop and
//! file formats.

pub mod checks;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod kv;
pub mod mdic;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{BnMode, Gradients, RunningStats, Tape, Var};
pub use tensor::{DType, Element, FlipKind, LabelMap, Real, Tensor};
