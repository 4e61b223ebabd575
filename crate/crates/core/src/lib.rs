//! Numerical verification suite for the homogenization of a semilinear
//! parabolic problem in a thick fractal junction.

// validation compares with `!(x > 0.0)` on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod linalg;
pub mod model;
pub mod fem;
pub mod newton;
pub mod eps_solver;
pub mod cell_solver;
pub mod homogenized;
pub mod corrector;
pub mod harness;
