//! Identity-conditioned text-to-image generation at desk scale.
//!
//! The crate implements a complete, testable pipeline: reference images of a
//! person are encoded and fused with the prompt's class-word feature, the
//! per-image embeddings are stacked into an identity embedding whose rows
//! replace the class-word row of the prompt embedding, and a small latent
//! diffusion model attends to the updated prompt during sampling. Around
//! that core sit the dataset construction pipeline, the LoRA fine-tuning
//! trainer, identity mixing, and an evaluation harness.
//!
//! All external perception models (encoders, detectors, captioners, ...)
//! are behind the adapter traits in [`adapters`], with deterministic seeded
//! mock implementations so every stage runs and tests hermetically.

pub mod adapters;
pub mod autodiff;
pub mod config;
pub mod data_pipeline;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod model;
pub mod rng;
pub mod stacked;
pub mod synthetic;
pub mod trainer;
pub mod vocab;

pub use adapters::AdapterSet;
pub use error::{Error, Result};
pub use grid::{BoolGrid, FaceBox, PixelGrid, SegmentMask};
pub use model::{ModelDims, ParamStore};
