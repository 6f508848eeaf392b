//! Wasserstein geodesics between sampled distributions.
//!
//! A forward field `F` and backward field `G` are trained against dual
//! potentials `Φ_F`, `Φ_G` in an alternating saddle-point scheme. The
//! geodesic from `ρ_a` to `ρ_b` is the straight-line pushforward
//! `(Id + tF)♯ρ_a`, and the transport cost is `E_{ρ_a}[L(F(x))]`.
//!
//! Exact small-scale references (closed-form Gaussian transport and the
//! Hungarian assignment) live in [`oracle`] and are used to validate
//! trained models.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod diffcore;
mod error;
pub mod geoflow;
pub mod measures;
pub mod objective;
pub mod oracle;
pub mod trainer;

pub use cost::CostModel;
pub use diffcore::{AdamState, Direction, Mlp, Tape};
pub use error::{Error, Result};
pub use geoflow::{GeoState, Preconditioner};
pub use measures::{MeasureSpec, PointCloud};
pub use trainer::{TrainConfig, TrainHistory};
