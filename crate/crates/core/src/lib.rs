//! Autoregressive sequence modeling on 2D Ising spin data.
//!
//! The crate bundles everything needed to study how the choice of 1D
//! ordering of a 2D lattice affects sequence-model training on thermal
//! spin configurations:
//!
//! - [`paths`]: zigzag, snake, Hilbert, and Morton orderings with locality
//!   metrics.
//! - [`ising`]: Metropolis/Wolff Monte Carlo sampling of the 2D Ising model
//!   and the on-disk dataset format.
//! - [`oracle`]: exact enumeration of small lattices for Boltzmann
//!   probabilities, entropies, observables, and KL divergences.
//! - [`autodiff`]: reverse-mode differentiation over dense arrays plus Adam.
//! - [`models`]: gated recurrent and causally-masked transformer sequence
//!   models over path-flattened spin configurations.
//! - [`training`]: NLL minimization, traces, and correlation diagnostics.
//! - [`experiment`]: reproducible multi-run recipes and report generation.

pub mod autodiff;
pub mod correlations;
pub mod experiment;
pub mod ising;
pub mod models;
pub mod oracle;
pub mod paths;
pub mod rng;
pub mod training;

pub use correlations::CorrelationTable;
pub use ising::{SampleBatch, SpinConfiguration, ThermalParams};
pub use models::{ArModel, ModelKind, SequenceDataset, TokenSequence};
pub use oracle::ExactDistribution;
pub use paths::{PathKind, PathOrdering, SiteCoord};
pub use training::{TrainConfig, TrainingTrace};
