//! Forward and inverse stationary radiative transfer on the unit square.
//!
//! The crate discretizes the transport equation with discrete ordinates,
//! splits boundary measurements into ballistic, single-scattering and
//! multiple-scattering parts, and recovers the attenuation (by Tikhonov
//! regularized X-ray inversion) and the scattering kernel (by adjoint-based
//! optimization). A slab solver supports the diffusive-limit study.

pub mod bump;
pub mod diffusive;
pub mod error;
pub mod fit;
pub mod forward;
pub mod geometry;
pub mod k_recovery;
pub mod linalg;
pub mod measurement;
pub mod medium;
pub mod quadrature;
pub mod sigma_recovery;
pub mod transport;

pub use error::{Error, Result};
