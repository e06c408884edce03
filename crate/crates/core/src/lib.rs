//! Speckle simulation, image metrics and the lightweight despeckle/deblur
//! network with its training, quantization and baseline filters.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod image;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod perf;
pub mod quant;
pub mod rng;
pub mod speckle;
pub mod train;

pub use checkpoint::{Checkpoint, Precision};
pub use error::{Error, ErrorCategory, Result};
pub use image::{Domain, Image, RoiKind, RoiSpec};
pub use metrics::MetricReport;
pub use net::{Branch, LayerKind, Model};
pub use quant::{IntModel, QuantMode, QuantParams, QuantizedModel};
pub use speckle::SpeckleSimConfig;
pub use train::{Corpus, TrainConfig};
