//! Truncated-FOV dental cone-beam CT toolkit.
//!
//! Simulates cone-beam projections of an analytic head phantom whose extent
//! exceeds the detector's field of view, then corrects the resulting
//! truncation artifacts with a two-stage scheme:
//!
//! 1. a coarse prior image over an extended domain (hash-grid neural field,
//!    FDK, or a coarse iterative reconstruction), masked to keep only the
//!    part outside the fine reconstruction region;
//! 2. subtraction of the prior's forward projection from the measured data,
//!    followed by regularized iterative reconstruction (separable quadratic
//!    surrogates with a Huber roughness penalty) on the fine grid.
//!
//! The crate is organized around the data flow: [`geometry`] describes the
//! scan and the two voxel grids, [`phantom`] provides exact ground truth,
//! [`projector`] implements the discrete operator `A` and its exact adjoint,
//! [`fdk`] and [`sqs`] are the reconstructors, [`inr`] the trainable prior,
//! [`correction`] the two-stage pipeline, and [`io`]/[`metrics`] handle
//! files and scoring.

pub mod correction;
pub mod fdk;
pub mod geometry;
pub mod inr;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod sqs;
pub mod threading;

pub use geometry::{Ray, ScanGeometry, VolumeGrid};
pub use phantom::{builtin_head_phantom, Ellipsoid, Phantom};
pub use projector::{
    back_project, forward_project, simulate_projections, sqs_weights, ProjectionStack, Volume,
};
