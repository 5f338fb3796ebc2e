//! Frequency-domain nonlinear system identification.
//!
//! The crate covers the full path from excitation design to a fitted
//! polynomial nonlinear state-space (PNLSS) model:
//!
//! - [`signals`]: odd-random-phase multisines and their harmonic grids.
//! - [`spectral`]: per-period DFTs, noise variance and even/odd distortion levels.
//! - [`lpm`]: Local Polynomial Method estimate of the best linear approximation.
//! - [`linmodel`]: rational fit, MDL order selection, balanced realization, ML refinement.
//! - [`trend`]: l1 trend filtering for drift removal.
//! - [`pnlss`]: monomial bases, simulation, analytic Jacobians and Levenberg-Marquardt fitting.
//! - [`bench`]: synthetic ground-truth cells and CSV ingestion.
//! - [`cli`]: the pipeline behind the `nlid` binary.

pub mod bench;
pub mod cli;
pub mod dft;
pub mod error;
pub mod linmodel;
pub mod lm;
pub mod lpm;
pub mod pnlss;
pub mod signals;
pub mod spectral;
pub mod trend;

pub use error::{Error, Result};
pub use num_complex::Complex;

/// Complex double used for all spectra.
pub type C64 = Complex<f64>;
