//! Training toolkit for semantic segmentation of top-down imagery.
//!
//! The crate wires two training mechanisms into a complete CPU pipeline:
//!
//! * **Feature-consistency over invertible augmentations** — an augmented copy
//!   of every training image is pushed through the network alongside the
//!   original, and a pixel-aligned MSE penalty ties the two feature maps
//!   together after the geometric transform is undone ([`losses::ai_loss`]).
//! * **Adaptive class sampling** — training images are drawn class-first, with
//!   class probabilities shaped by the static pixel distribution and a running
//!   confidence estimate ([`sampler`]).
//!
//! Everything – dataset generation, augmentation, the encoder-decoder model
//! with analytic gradients, losses, sampling, metrics, and the training loop –
//! is deterministic given a seed and runs on a desk-scale CPU budget.

pub mod augment;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use augment::{AugRecord, GeometricOp, PhotometricOp};
pub use datamodel::{ClassTaxonomy, Dataset, DatasetIndex, Sample};
pub use error::{Error, Result};
pub use losses::LossReport;
pub use metrics::MetricsAccumulator;
pub use model::{ArchDescriptor, ForwardTrace, SegModel};
pub use sampler::{ConfidenceTracker, SamplerState};
pub use trainer::{LrSchedule, TrainConfig};
