//! A data assimilation laboratory.
//!
//! The crate collects the classical Bayesian estimators for a hidden Markov
//! model with nonlinear dynamics and observations:
//!
//! * exact linear-Gaussian recursions ([`kalman`]): Kalman filter, extended
//!   Kalman filter and the 4D Kalman smoother with fixed-lag shifting;
//! * variational solvers ([`var`]): incremental 3D-VAR and 4D-VAR with an
//!   adjoint gradient and a matrix-free conjugate gradient inner loop;
//! * deterministic ensemble filters ([`ensemble`]): ETKF, MLEF, inflation and
//!   mean-preserving rotations;
//! * fixed-lag ensemble smoothers ([`smoothers`]): EnKS, IEnKS (bundle) and
//!   the single-iteration SIEnKS;
//! * joint state/surrogate-model estimation by coordinate descent ([`daml`]);
//! * a twin-experiment harness and CLI ([`harness`]).
//!
//! Dense linear algebra is done with `nalgebra`; all randomness flows through
//! explicitly seeded ChaCha streams (see [`rng`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod daml;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod rng;
pub mod smoothers;
pub mod var;

pub use error::{Error, Result};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
