//! Pseudo-spectral stochastic quantization of the O(N) linear sigma model on
//! the torus.
//!
//! The crate integrates the coupled renormalized Langevin equations of the
//! N-component model, solves the self-consistent mean-field equation with a
//! finite ensemble, and checks the exact large-N predictions (free-field
//! limit, bubble-resummed correlations, mass-shift fixed points,
//! integration-by-parts identities) on the cutoff lattice.

pub mod convergence;
pub mod dynamics;
pub mod error;
pub mod exact;
pub mod harness;
pub mod lattice;
pub mod meanfield;
pub mod noise;
pub mod observables;
pub mod record;
pub mod renorm;
pub mod stats;

pub use error::{Error, Result};
pub use lattice::{dealiased_product, Field, TorusGrid, C64};
