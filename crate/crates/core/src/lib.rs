//! Library behind the `simba` CLI: a cellular KPI simulator with fault
//! injection, windowed preprocessing, three spatio-temporal classifier
//! architectures built on an in-crate autodiff tape, and the training,
//! evaluation, and comparison machinery that ties them together.

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Padding, Tape, Tensor, TensorId};
