//! Core algorithmics for discovering task-specific cross-sections in a toy
//! transformer, fitting supervised feature dictionaries at them, and scoring
//! sparse autoencoders against those dictionaries.
//!
//! The crate is `no_std` (with `alloc`): all IO, file formats and the CLI
//! live in the companion crate.

#![no_std]

extern crate alloc;

pub mod attribution;
pub mod dictionary;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod projection;
pub mod task;
pub mod train;
pub mod rng;
pub mod sae;
