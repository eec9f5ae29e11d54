//! Time-resolved tracking of single-qubit noise parameters.
//!
//! The crate follows the measurement-to-physics chain:
//!
//! * [`emulator`] draws binary outcome streams from the Markovian noise model,
//!   optionally driven by nested random-telegraph processes.
//! * [`averaging`] turns outcomes into probability estimates with a Gaussian
//!   (or fixed) moving window.
//! * [`noisefit`] fits detuning, relaxation and dephasing rates to every time
//!   slice and attaches bootstrap errors.
//! * [`hdfa`] splits a fitted trace into a hierarchy of two-state fluctuators.
//! * [`spectral`] estimates and models power spectra of parameter traces.
//! * [`physics`] maps fluctuator amplitudes and rates onto transmon charge
//!   dispersion and charge-dipole defect models.
//! * [`pipeline`] wires the stages together behind a declarative config.

pub mod averaging;
pub mod emulator;
pub mod error;
pub mod hdfa;
pub mod io;
pub mod noisefit;
pub mod physics;
pub mod pipeline;
pub mod rng;
pub mod spectral;
mod stats;

pub use error::{Error, Result};
