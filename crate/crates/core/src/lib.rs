//! Decentralized formation control with event-triggered consensus messaging.
//!
//! The crate is organized around the data path of one simulation step:
//! [`env`] provides the particle world and observations, [`comm`] gates and
//! routes messages through the event-trigger mechanism, [`net`] holds every
//! learnable block of the consensus pipeline, [`losses`] the training
//! objectives, and [`trainer`] the PPO-style update loop that ties them
//! together. [`tape`] is the small reverse-mode autodiff engine the learnable
//! blocks are built on.

// Validation comparisons are written negated (`!(x > 0.0)`) so NaN fails
// them; indexed loops mirror the math across parallel arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod comm;
pub mod config;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
