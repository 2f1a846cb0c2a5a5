//! Spatial-temporal basis expansion (ST-BEM) channel tracking for massive MIMO.
//!
//! The crate is organised bottom-up:
//!
//! * [`channel`] generates multi-ray ULA channels and received signals.
//! * [`basis`] holds the beamspace (DFT) and CE-BEM temporal expansions.
//! * [`grouping`] partitions users into angle-division groups.
//! * [`ukf`] and [`em`] track the central DOA and learn its noise variances.
//! * [`as_track`] estimates the angular spread from the block covariance.
//! * [`pilots`] designs training sequences and recovers BEM coefficients.
//! * [`sim`] wires everything into a Monte Carlo harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod as_track;
pub mod basis;
pub mod channel;
pub mod checks;
pub mod dump;
pub mod em;
pub mod error;
pub mod grouping;
pub mod linalg;
pub mod numeric;
pub mod pilots;
pub mod sim;
pub mod ukf;

pub use error::{Error, Result};

pub use num_complex::Complex64 as C64;

/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
