//! Exact transport references at desk scale.

mod assignment;
mod gaussian;

pub use assignment::{exact_discrete_ot, hungarian, mccann_interpolate, Assignment, MAX_DISCRETE_POINTS};
pub use gaussian::{gaussian_w2, symmetric_eigen, symmetric_sqrt, GaussianOtSolution};
