//! Future token prediction (FTP) language models and their GPT-style baseline.
//!
//! An FTP model runs a causal transformer encoder, expands each top-layer
//! token embedding into a short learned pseudo-sequence, and trains a small
//! cross-attending decoder to predict the next `N` tokens from it with
//! exponentially discounted losses. The crate also carries the turtle
//! grid-world program-synthesis benchmark and frozen-embedding probes.
//!
//! Everything here is `no_std` + `alloc`; file formats and the command line
//! live in the `ftp` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gridworld;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod training;

pub use error::{Error, Result};
