//! coopseg: a desk-scale lab for cooperative feature-sharing segmentation.
//!
//! Two identically structured encoder-decoder networks train simultaneously
//! under a summed loss while one-directional connections send feature maps
//! from the "top" network into the "bottom" one. The crate builds and
//! compares four topologies — a single network, a jointly trained ensemble,
//! same-layer connections, and multiple-layer connections — on synthetic
//! shape-segmentation benchmarks, scoring with per-class IoU / mIoU.
//!
//! Everything is deterministic: identical seeds and configs give
//! bit-identical parameters, batches, losses, and reports.

pub mod coop;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model_io;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;
