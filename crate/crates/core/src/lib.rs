//! Uncertainty quantification from training-error trajectories.
//!
//! A regression model logs every training sample's error at the end of every
//! epoch. Those trajectories are binned into per-sample error PDFs
//! ([`trajlog`]). At inference time a test point's PDF is the average of the
//! PDFs of its k nearest training samples in the model's latent space
//! ([`knn`], [`uq`]). The expectation of that PDF is the uncertainty estimate,
//! its CDF gives confidence thresholds, and the first-neighbor distance flags
//! out-of-domain inputs.
//!
//! [`calib`] scores any uncertainty method against true errors, [`reweight`]
//! turns trajectories into per-sample loss weights, and [`toylab`] trains a
//! small network on synthetic data to produce real trajectories end to end.

pub mod calib;
pub mod container;
pub mod error;
pub mod knn;
mod par;
pub mod reweight;
pub mod toylab;
pub mod trajlog;
pub mod uq;

pub use error::{Error, Result};
pub use knn::{batch_search, FlatIndex, HnswIndex, HnswParams, NeighborList, VectorIndex};
pub use trajlog::{BinGrid, DescriptorSet, EpsMaxPolicy, ErrorTrajectoryLog, PdfBank, Spacing};

pub use uq::{OodPolicy, OodThreshold, UqEstimate};
