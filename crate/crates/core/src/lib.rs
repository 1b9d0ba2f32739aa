//! Contingency model predictive control for an automated lane merge.
//!
//! A robust horizon with tightened constraints and a terminal set shares its
//! first input with a performance horizon predicted through a Gaussian-process
//! model of the other vehicle. Everything here is `no_std` with `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checks;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod kpi;
pub mod ocp;
pub mod qp;
pub mod safety;
pub mod sim;

pub use error::{Error, Result};
