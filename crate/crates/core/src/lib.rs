//! Bayesian CT reconstruction of layered pipes.
//!
//! The crate simulates offset fan-beam sinograms of a layered pipe phantom,
//! builds structural Gaussian priors from the known layer geometry and
//! material physics, and characterizes the resulting Gaussian posterior by
//! MAP estimation and by sampling through perturbed least-squares solves.
//!
//! Images are vectorized column-major: pixel `(row, col)` of an `N x N` grid
//! has index `col * N + row`, with rows running downward within a column.
//! Sinograms are angle-major: all detector readings of angle 0, then angle 1,
//! and so on.
//!
//! Every linear map (projector, prior factors, the stacked posterior system)
//! implements [`solver::LinearOperator`] and is applied matrix-free; the
//! least-squares engine is [`solver::cgls`].

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod materials;
pub mod phantom;
pub mod posterior;
pub mod priors;
pub mod projector;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{GeometryConfig, ImageGrid, Ray, ScanGeometry};
pub use projector::{Image, Projector, Sinogram, SystemMatrix};
