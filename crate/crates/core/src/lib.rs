//! Constant-memory tiled inference for CycleGAN-style generators.
//!
//! Images of arbitrary size are split into fixed-size patches and run through
//! the generator one patch at a time. Instance normalization is replaced by
//! one of four strategies (see [`NormMode`]); the kernelized strategy caches
//! per-patch statistics in a first pass and convolves them with a small
//! kernel during a second pass, which removes the seams that plain per-patch
//! normalization produces while keeping peak memory independent of image size.

pub mod error;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod normstrat;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod weights;

pub use error::{KinError, Result};
pub use generator::{Generator, GeneratorConfig, NormHook, ProbeRecord, WeightSource};
pub use io::{brightness_gradient, synthetic_gradient, Rgb8Image};
pub use normstrat::{
    KernelKind, KinKernel, LayerStats, NormLayerState, NormMode, NormSession, Phase, StatTable,
};
pub use pipeline::{
    translate, translate_session, ExecOptions, PatchOrder, RemainderPolicy, TileGrid,
    TranslateOptions, TranslationReport,
};
pub use tensor::{MemoryMeter, Shape, Tensor};
pub use weights::{NamedArray, WeightStore};
