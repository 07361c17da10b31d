//! Monocular whole-body kinematics by differentiable skeleton fitting, plus
//! the gait and clinimetric statistics computed from the fitted
//! trajectories.
//!
//! This crate is `no_std` (with `alloc`); file formats, the CLI and
//! multi-threaded trial evaluation live in the `kinefit` crate.

#![no_std]
extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autodiff;
pub mod fitting;
pub mod gait;
pub mod geometry;
pub mod implicit;
pub mod skeleton;
pub mod stats;
pub mod synth;
