//! A planning agent for a Flappy-Bird-like physics game.
//!
//! A convolutional network looks at the last four frames and proposes
//! Dirichlet concentrations over actions. The planner samples action plans
//! from that prior, rolls them through a learned Newtonian forward model, and
//! acts on the plans that avoid collisions.

pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod planner;
pub mod prior;

pub use error::{Error, Result};
