//! Locally varying linear model of coregionalization.
//!
//! Multivariate samples are Gaussianized and decorrelated locally around every
//! sample, the local correlation matrices are interpolated over a grid with
//! weighted Fréchet means on the manifold of correlation matrices, and
//! independent factors simulated by turning bands are recorrelated and
//! back-transformed node by node.

pub mod error;
pub mod io;
pub mod kriging;
pub mod local_model;
pub mod manifold;
pub mod neighborhood;
pub mod samples;
pub mod seeding;
pub mod simulate;
pub mod synthetic;
pub mod transform;
pub mod variogram;

pub use error::{Error, Result};
