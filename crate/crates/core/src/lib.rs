//! Two-in-one knowledge distillation laboratory.
//!
//! A dual-branch teacher (RGB images plus their high-pass frequency view,
//! fused through cross-branch attention) is distilled into a single-branch
//! student. The student's backbone feature is rotated by two learnable
//! `SO(d)` matrices before the RGB and frequency projectors, and the
//! rotations are trained to homogenize the two distillation gradients.

pub mod datagen;
pub mod distill;
pub mod error;
pub mod frequency;
pub mod metrics;
pub mod nn;
pub mod rotation;
pub mod student;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
