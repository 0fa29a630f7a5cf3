//! Metropolis-adjusted interacting particle samplers.
//!
//! The chain state is an ensemble of `M` particles in `R^d`. Proposals come
//! from time-discretized interacting particle dynamics ([`dynamics`]) and are
//! corrected by Metropolis-Hastings acceptance at the level of the whole
//! ensemble, single particles, or fixed blocks of particles ([`metropolis`]).
//! [`bias_lab`] assembles exact transition matrices on small discrete state
//! spaces to check invariance, and to exhibit the bias of the naive
//! simultaneous particle-wise variant.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod bias_lab;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod metropolis;
pub mod rng;
pub mod targets;

pub use error::{Error, Result};
