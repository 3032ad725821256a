//! Mixed-supervision segmentation with a dual-branch teacher/student network.
//!
//! A shared encoder feeds two identical decoders. The top branch (teacher)
//! learns from densely labeled images; the bottom branch (student) learns
//! from sparse pixel labels, from the teacher's predictions through a
//! smoothed KL term, and from an entropy term that rewards confident
//! predictions on sparsely labeled images.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the aliases below
//! fix the scalar for common uses.

pub mod data;
pub mod error;
pub mod field;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImageGrid32 = field::ImageGrid<f32>;
pub type ImageGrid64 = field::ImageGrid<f64>;
pub type SimplexField32 = field::SimplexField<f32>;
pub type SimplexField64 = field::SimplexField<f64>;
pub type LogitField32 = field::LogitField<f32>;
pub type LogitField64 = field::LogitField<f64>;
pub type DualOutput32 = field::DualOutput<f32>;
pub type DualOutput64 = field::DualOutput<f64>;
pub type UNet32 = model::UNet<f32>;
pub type UNet64 = model::UNet<f64>;

pub type LabeledSample32 = data::LabeledSample<f32>;
pub type LabeledSample64 = data::LabeledSample<f64>;
pub type PartialSample32 = data::PartialSample<f32>;
pub type PartialSample64 = data::PartialSample<f64>;
pub type MixedDataset32 = data::MixedDataset<f32>;
pub type MixedDataset64 = data::MixedDataset<f64>;
