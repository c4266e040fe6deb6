//! Hamilton-Jacobi safety filtering on a privileged state grid and in the
//! latent space of a learned world model, for a Dubins-car benchmark.

pub mod artifacts;
pub mod classifier;
mod codec;
pub mod dataset;
pub mod dubins;
pub mod error;
pub mod eval;
pub mod filter;
pub mod grid;
pub mod nn;
pub mod reach;
pub mod rng;
pub mod session;
pub mod types;
pub mod world_model;

pub use codec::sha256_hex;
pub use error::{DecodeError, Error, Result};
pub use rng::Rng;
pub use types::{
    wrap_angle, ActionIndex, ActionSet, Dataset, DatasetHeader, Observation, State, Step, StepRef,
    TerminatedReason, Trajectory,
};
