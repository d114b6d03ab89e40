//! Scatter functionals and an empirical harness for their structural
//! properties: affine equivariance, additivity, the (joint) independence
//! properties, full affine equivariance across dimensions and continuity at
//! the normal law.

#[cfg(feature = "cli")]
pub mod cli;
pub mod distributions;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod properties;
pub mod scatter;

pub use distributions::{sample, standardized_sum_spec, true_covariance, DistributionSpec, MarginalSpec, RadialSpec, Seed};
pub use error::{Error, Result};
pub use linalg::{frobenius_distance, mahalanobis_distances, spd_inverse, Sample, SpdMatrix};
pub use scatter::{
    calibrate_gaussian, cov, cov4, m_scatter, mcd, symmetrize, tyler_shape, Calibration, GaussianCalibration,
    ScatterEstimate, ScatterFamily, ScatterSpec, WeightSpec,
};
