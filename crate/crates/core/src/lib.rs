//! Phonon dynamics and non-Gaussianity of the relative phase between two
//! tunnel-coupled one-dimensional quasicondensates.
//!
//! Units throughout: ħ = k_B = 1, lengths in μm, times in ms.
//!
//! * [`model`]: trap geometries, mode functions and frequencies, physical parameters.
//! * [`sampler`]: Gaussian thermal ensembles and classical sine-Gordon Metropolis sampling.
//! * [`dynamics`]: linear evolution in mode space and real space, quadrature covariances, propagators.
//! * [`stats`]: four-point non-Gaussianity, counting statistics, correlation functions, plateau fits.
//! * [`tomography`]: reconstruction of the initial mode covariance from phase correlations at several times.
//! * [`io`], [`config`] and [`cli`]: file formats, run configuration and the `gaussify` command.
//!
//! ```
//! use gaussify::model::{Geometry, ModeBasis, PhysParams, Trap};
//! use gaussify::sampler::{sample_gaussian_thermal, Statistics};
//! use gaussify::stats::{ensemble_non_gaussianity, Window};
//!
//! let geo = Geometry::new(Trap::BoxNeumann, 50.0, 25)?;
//! let params = PhysParams::new(1.5, 30.0, 60.0)?.with_beta(0.3)?;
//! let basis = ModeBasis::linear(&geo, params.c)?;
//! let ens = sample_gaussian_thermal(&basis, &params, Statistics::Classical, 500, 1)?;
//! let m4 = ensemble_non_gaussianity(ens.phase.view(), &Window::centered(25, 13)?, 0, 0)?;
//! assert!(m4.m4 < 0.3);
//! # Ok::<(), gaussify::Error>(())
//! ```

pub mod error;
pub mod model;
pub mod sampler;
pub mod dynamics;
pub mod stats;
pub mod tomography;
pub mod io;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
