//! A desk-scale chest-radiograph vision-language model.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide a
//! small `f64` reverse-mode engine; [`vision`], [`text`], [`fusion`] and
//! [`decoder`] build the four model components on top of it; [`objectives`]
//! and [`train`] implement masked pretraining and captioning/VQA/detection
//! fine-tuning; [`synth`] generates the synthetic radiograph corpus and
//! [`metrics`] evaluates detection quality.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod metrics;
mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use autodiff::{Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
