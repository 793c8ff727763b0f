//! Measurement-induced entanglement of two remote, laser-cooled mechanical
//! oscillators.
//!
//! * [`cooling`] holds the physical parameters and the cooling quantities.
//! * [`analytic`] evaluates the closed-form correlators, witness and filter chain.
//! * [`trajectory`] simulates the conditioned oscillators with photon clicks.
//! * [`master_equation`] is a fixed-step density-matrix integrator used as an
//!   independent oracle for the trajectory code.
//! * [`counting`] turns click records into correlation and witness estimates.
//! * [`heterodyne`] synthesizes and analyses heterodyne measurement records.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cooling;
pub mod counting;
pub mod error;
pub mod heterodyne;
pub mod master_equation;
pub mod quadrature;
pub mod stats;
pub mod trajectory;

pub use error::{Error, Result};
