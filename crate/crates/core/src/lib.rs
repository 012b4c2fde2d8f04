//! Constrained ensembles of volumetric GANs for producing sharable synthetic
//! 3D datasets.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: the voxel-grid data model, preprocessing, phantom data,
//!   augmentation, fold splitting and the binary container format.
//! - [`nn`]: a small reverse-mode engine over sequential layer lists, with
//!   BCE loss and Adam.
//! - [`gan`]: the 3D DCGAN generator/discriminator and adversarial training.
//! - [`metrics`]: raw-space Fréchet distance and histogram entropies / mutual
//!   information.
//! - [`ensemble`]: the FD + MI inclusion screen, ensemble growth and
//!   persistence.
//! - [`validation`]: the region classifier, FROC curves and the growth
//!   termination rule.
//! - [`embedding`]: PCA + exact t-SNE diagnostics.
//! - [`pipeline`]: run configuration, ledger, CSV/SVG output and the stage
//!   runners used by the `cgane` binary.

pub mod embedding;
pub mod ensemble;
pub mod gan;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod validation;
pub mod volume;

pub use volume::{LabeledDataset, Volume};
