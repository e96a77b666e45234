//! Watermark-assisted machine unlearning.
//!
//! A desk-scale lab: tabular MLP classifiers, a residual dense watermark
//! codec, first-order unlearning baselines and the bi-level codec/message
//! design that shapes watermarks to help unlearning.

pub mod blo;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod evalx;
pub mod harness;
pub mod nets;
pub mod real;
pub mod rng;
pub mod unlearn;
pub mod watermark;

pub use error::{Error, Result};
pub use real::Real;

pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type ParamSet = nets::ParamSet<f64>;
pub type LabeledSet = data::LabeledSet<f64>;
pub type DatasetBundle = data::DatasetBundle<f64>;
pub type WatermarkMessage = watermark::WatermarkMessage<f64>;
pub type BloConfig = blo::BloConfig<f64>;
pub type MuConfig = unlearn::MuConfig<f64>;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type ParamSet32 = nets::ParamSet<f32>;
