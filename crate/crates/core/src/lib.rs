//! Classical toolkit for Carleman-linearized diffusion ODE samplers.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`schedule`]: VP noise schedule, log-SNR grids and the exponentially weighted
//!   Taylor integrals used by every exponential-integrator coefficient.
//! * [`model`]: polynomial noise-prediction models, their total λ-derivatives and
//!   drift Jacobians.
//! * [`reference`]: nonlinear reference solvers (RK4 oracle, DPM-solver-k, UniPC-p).
//! * [`carleman`]: lifting of states and polynomial step maps to linear form.
//! * [`system`]: global all-steps sparse systems, conditioning and sparsity reports.
//! * [`solve`]: structured and Krylov solves, an LCHS emulator and query-cost models.
//! * [`diagnostics`]: drift spectra, the dissipativity measure and sweeps.
//! * [`readout`]: sampling-based sparse state recovery and tomography cost.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod carleman;
pub mod diagnostics;
mod error;
pub mod model;
pub mod readout;
pub mod reference;
pub mod schedule;
pub mod solve;
pub mod sparse;
pub mod system;

pub use error::{Error, Result};
