//! Functional principal components for sparse, irregularly sampled
//! longitudinal trajectories.
//!
//! The crate is organised bottom-up:
//!
//! - [`curves`]: samples, the common evaluation grid and quadrature.
//! - [`smooth`]: local linear smoothers in one and two dimensions.
//! - [`pace`]: mean/covariance estimation, eigendecomposition and
//!   conditional-expectation scores.
//! - [`inference`]: permutation tests for group mean and covariance functions.
//! - [`evaluate`]: stratified cross-validated goodness of fit and
//!   latest-observation prediction accuracy.
//! - [`simulate`]: Karhunen–Loève cohort generator.
//!
//! Data-parallel loops (per grid point, per subject, per permutation
//! replicate, per repeat) run on rayon when the `parallel` feature is enabled
//! (the default). Every randomized step draws from a generator seeded by
//! [`parallel::derive_seed`], so results do not depend on execution order or
//! on whether the feature is enabled.

pub mod curves;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod json;
pub(crate) mod linalg;
pub mod pace;
pub mod parallel;
pub mod simulate;
pub mod smooth;

pub use curves::{CurveMatrix, LongitudinalSample, TimeGrid};
pub use error::{FpcaError, Result};
pub use evaluate::{FoldAssignment, FutureAccuracy, GofResult, ModelScope};
pub use inference::{PairwiseResult, PermutationTestResult, StandardizedCurves};
pub use pace::{FitConfig, FpcaModel};
pub use simulate::{FunctionSpec, KlSpec};
pub use smooth::{Bandwidth, ScatterPoint1D, ScatterPoint2D};
