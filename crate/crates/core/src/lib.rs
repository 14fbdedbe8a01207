//! Multivariate sensor anomaly scoring with quantile regression, gated
//! temporal attention and a leaky integrate-and-fire spiking classifier.

pub mod autodiff;
pub mod data;
pub mod eqrnn;
pub mod error;
pub mod gta;
pub mod nn;
pub mod pipeline;
pub mod snn;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use nn::{layer_param_count, ParamSet};
pub use pipeline::{ClassificationReport, PipelineConfig, Prepared, RunOptions, Stage};
