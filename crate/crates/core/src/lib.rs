//! Space-time graph filters and space-time graph neural networks over
//! fixed and time-varying graphs, with the tooling to measure how they
//! react to random edge drops.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`graph`] | graphs, shift operators, spectra, random edge sampling |
//! | [`spacetime`] | `N × T × F` signals and the space/time shifts |
//! | [`stgf`] | fixed and generalized space-time graph filters, frequency analysis |
//! | [`stgnn`] | multi-layer networks and readout |
//! | [`training`] | exact gradients, loss, ADAM, training loop |
//! | [`flocking`] | flocking environment, expert controller, datasets, rollouts |
//! | [`stability`] | edge-drop sweeps, stability bounds, trend fits, reports |
//! | [`cli`] | the `stgnn` command-line pipelines |

pub mod cli;
pub mod error;
pub mod flocking;
pub mod graph;
pub mod seed;
pub mod spacetime;
pub mod stability;
pub mod stgf;
pub mod stgnn;
pub mod training;

pub use error::{Error, Result};
