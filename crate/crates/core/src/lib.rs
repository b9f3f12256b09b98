//! Bounded-confidence modelling of how a person's value scores drift under
//! the influence of a small circle of friends, and learning of the model's
//! interaction threshold from observed trajectories.

pub mod cli;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod labeling;
pub mod pso;
pub mod regress;

pub use error::{Error, Result};
