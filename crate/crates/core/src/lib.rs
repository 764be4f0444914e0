#![cfg_attr(not(feature = "std"), no_std)]
//! Core of a tabular laboratory for input-agnostic reasoning collapse in
//! policy-gradient training.
//!
//! Everything here is pure computation over owned data and builds without
//! `std` (with `alloc`). The `std` feature adds thread-parallel rollout and
//! scoring; results are bit-identical either way.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod envs;
pub mod error;
pub mod filtering;
pub mod gradients;
pub mod infotheory;
pub mod math;
pub mod miproxy;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
