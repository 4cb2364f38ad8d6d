//! Atmospheric-entry guidance laboratory.
//!
//! The crate couples a numerical predictor-corrector bank-angle guidance law
//! (FNPEG) with three interchangeable density estimators: a fixed exponential
//! law, the same law corrected by a first-order fading-memory filter, and a
//! sequence-to-sequence LSTM trained on closed-loop Monte Carlo data.
//!
//! Module map:
//!
//! - [`atmos`]: exponential law, surrogate stochastic Mars atmosphere,
//!   gas model and the pseudodensity transform.
//! - [`dynamics`]: Cartesian and spherical equations of motion, frame
//!   conversion and a fixed-step RK4 integrator.
//! - [`fnpeg`]: longitudinal predictor/corrector and lateral deadband logic.
//! - [`estimators`]: the density estimator contract and its implementations.
//! - [`neural`]: LSTM layers, dropout, BPTT, ADAM and the training loop.
//! - [`sim`]: closed-loop truth propagation with guidance in the loop.
//! - [`pipeline`]: feature extraction, normalization, datasets and the
//!   curriculum loop.
//! - [`evalmc`]: measurement noise, Monte Carlo campaigns and metrics.

pub mod atmos;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod evalmc;
pub mod fnpeg;
pub mod neural;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
