//! Numerical laboratory for random conductance models on periodic lattices.
//!
//! The crate simulates divergence-form heat flow with random edge
//! conductances on a d-dimensional torus and measures how fast local
//! observables of the environment relax. It provides:
//!
//! - [`lattice`]: torus geometry and the discrete gradient/divergence
//!   calculus;
//! - [`environment`]: i.i.d. per-direction conductance laws, sampling,
//!   shifts, resampling, and the negative-moment condition on
//!   `sup_i a(e_i)`;
//! - [`heat`]: explicit-Euler evolution, heat-kernel columns, and
//!   on-diagonal decay diagnostics;
//! - [`weights`]: minimal-resistance path weights, detour constructions,
//!   inverse path indices, and the scale-averaged moderation statistic;
//! - [`corrector`]: massive corrector solves by conjugate gradients and
//!   moment sweeps in the mass parameter;
//! - [`relaxation`]: Monte-Carlo moment series, power-law decay fits, and
//!   the slow-relaxation counterexample experiment;
//! - [`config`] / [`experiment`]: batch experiment configuration, dispatch,
//!   and CSV/plot-data emission used by the `rcm-lab` binary.

pub mod config;
pub mod corrector;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod heat;
pub mod lattice;
pub mod math;
pub mod relaxation;
pub mod weights;

pub use error::{Error, Result};
