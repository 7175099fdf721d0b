//! Audio-visual segmentation with audio prompts.
//!
//! `gavs-core` is a `no_std` (+`alloc`) library holding everything needed to
//! train and evaluate an encoder-prompt-decoder segmentation model on CPU:
//!
//! * [`graph`]: dense `f64` tensors with tape-based reverse-mode autodiff,
//!   plus a central finite-difference [`gradcheck`] oracle;
//! * [`encoders`]: a small ViT with bottleneck adapters and an MLP audio encoder;
//! * [`sap`]: semantic-aware audio prompts projected into six decoder token slots;
//! * [`decoder`]: two-way transformer layers with the correlation adapter
//!   (ColA), mask-embedding upscaling and the query-token mask head;
//! * [`loss`], [`optim`], [`train`]: objectives, Adam and the training loop;
//! * [`data`], [`split`]: a deterministic synthetic sounding-scene generator
//!   and zero-/few-shot splits;
//! * [`metrics`]: mIoU, F-score, cIoU and AUC.
//!
//! File formats, configuration files and the command line live in the
//! companion `gavs` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sap;
pub mod split;
pub mod tensor;
pub mod train;

pub use config::{EvalConfig, GavsConfig, TrainConfig};
pub use decoder::{FusionMode, TuningStrategy};
pub use error::{Error, Result};
pub use graph::{GradMode, Gradients, Graph, Var};
pub use model::GavsModel;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
