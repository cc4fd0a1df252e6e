//! LoRA-adapted deep unfolding networks for image restoration.
//!
//! One frozen backbone denoiser is shared across all unfolding stages while
//! small per-stage low-rank adapters modulate its behavior. The toolkit
//! covers three linear degradation models (blockwise compressive sensing,
//! coded-aperture snapshot spectral imaging, blur-and-decimate
//! super-resolution), PGD and HQS stage iterations, the two-phase training
//! pipeline (backbone pretraining, then frozen-backbone adapter
//! fine-tuning), PSNR/SSIM evaluation, and the on-disk tensor/checkpoint
//! formats used by the `lorun` command-line tool.

pub mod check;
pub mod error;
pub mod graph;
pub mod denoisers;
pub mod lora;
pub mod operators;
pub mod rng;
pub mod tensor;

pub use error::{LorunError, Result};
pub use tensor::Tensor;
