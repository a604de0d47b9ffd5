//! Unsupervised day-to-night adaptation for semantic segmentation on
//! procedurally generated street scenes.

pub mod config;
pub mod dsr;
pub mod error;
pub mod evalkit;
pub mod fpa;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod pseudo;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Element, Scalar};
pub use tensor::tape::{Tape, Var};
pub use tensor::{LabelMap, Tensor, IGNORE};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
