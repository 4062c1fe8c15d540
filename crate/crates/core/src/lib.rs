//! Certified truncated-Taylor integration of scalar ODEs.
//!
//! The toolkit freezes the order-`ell` Taylor polynomial of `f(y, t)` in the
//! state at every sampling instant, integrates the resulting surrogate ODE
//! segment by segment (optionally with impulsive jumps and a continuous
//! `lambda(t) * x` forcing), and compares it against a high-accuracy reference
//! solution. Alongside the numerics it evaluates a-priori error certificates
//! and checks whether a true solution shadows the approximate orbit.
//!
//! Modules, bottom-up:
//! - [`problem`]: fields, state derivatives, boundedness constants.
//! - [`sampler`]: aggregate constants, closed-form step bounds, first-exit
//!   thresholds and admissible sampling sequences.
//! - [`integrator`]: local truncated flows, perturbed trajectories, reference
//!   oracle, error trajectories.
//! - [`certificates`]: unperturbed, impulsive and continuous error bounds.
//! - [`shadowing`]: pseudo-orbits, their classes and shadowing searches.

pub mod certificates;
pub mod error;
pub mod export;
pub mod integrator;
pub mod problem;
pub mod sampler;
pub mod shadowing;

pub use error::{Error, ErrorCategory, Result};
pub use problem::{BoundConstants, DerivativeStack, Field, OdeProblem};
