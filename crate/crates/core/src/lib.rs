//! Homography-flow basis representation with subspace projection and
//! warp-equivariance losses.
//!
//! The crate provides:
//!
//! - [`geometry`]: homography algebra, DLT estimation, homography/flow
//!   conversion, and backward bilinear warping;
//! - [`bases`]: the 8 orthonormal homography-flow bases for a grid size,
//!   obtained by QR over normalized tangent fields, with synthesis and
//!   projection;
//! - [`subspace`]: the low-rank representation projector
//!   `V (VᵀV)⁻¹ Vᵀ` over feature maps plus PCA energy diagnostics;
//! - [`fitting`]: basis-weight estimation from sparse correspondences,
//!   dense flows (IRLS-robust), or directly from an image pair via
//!   coarse-to-fine Gauss-Newton photometric alignment;
//! - [`losses`]: triplet, feature-identity, and inverse-consistency losses
//!   with pluggable feature transforms;
//! - [`bench`]: a seeded synthetic benchmark with ground-truth homographies,
//!   labeled point pairs, and the point-matching-error metric;
//! - [`io`]: bit-exact `.flo`, PGM, PPM, feature-map, and weights formats.
//!
//! With the default `parallel` feature, dense per-pixel loops and benchmark
//! samples fan out over rayon; reductions fold per-row partials in row order,
//! so every result is bit-identical across thread counts and also matches
//! the sequential build (`--no-default-features`).

pub mod bases;
pub mod bench;
pub mod error;
pub mod exec;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod rng;
pub mod subspace;

pub use bases::{BasisSet, BasisWeights};
pub use error::{Error, Result};
pub use geometry::{FlowField, GrayImage, Homography, Point2, ValidityMask};
