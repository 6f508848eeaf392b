//! Velocity costs `L`, their Legendre conjugates `H`, and the inverse
//! gradient map that turns a dual potential gradient into a velocity.

use crate::{Error, Result};

/// A strictly convex, superlinear velocity cost with a closed-form conjugate.
pub trait ConvexCost {
    /// `L(v)`.
    fn lagrangian(&self, v: &[f64]) -> f64;
    /// `∇L(v)`.
    fn grad_lagrangian(&self, v: &[f64]) -> Vec<f64>;
    /// `H(m) = sup_v ⟨v, m⟩ - L(v)`.
    fn hamiltonian(&self, m: &[f64]) -> f64;
    /// `∇H(m)`, which is also `(∇L)⁻¹(m)`.
    fn grad_hamiltonian(&self, m: &[f64]) -> Vec<f64>;

    fn grad_l_inverse(&self, m: &[f64]) -> Vec<f64> {
        self.grad_hamiltonian(m)
    }
}

/// The radial power family `L(v) = β|v|^α / α`.
///
/// `α = 2, β = 1` is the quadratic cost `|v|²/2`; `α = β = 3/2` gives
/// `|v|^{3/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    alpha: f64,
    beta: f64,
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("cost exponent alpha must be > 1, got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Argument(format!("cost scale beta must be > 0, got {beta}")));
        }
        Ok(CostModel { alpha, beta })
    }

    /// `|v|²/2`.
    pub fn quadratic() -> Self {
        CostModel {
            alpha: 2.0,
            beta: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Conjugate exponent `α / (α - 1)`.
    pub fn q(&self) -> f64 {
        self.alpha / (self.alpha - 1.0)
    }

    pub fn is_quadratic(&self) -> bool {
        self.alpha == 2.0
    }

    /// Radial profile `β r^α / α`.
    pub fn lagrangian_radial(&self, r: f64) -> f64 {
        self.beta * r.powf(self.alpha) / self.alpha
    }

    /// Radial profile `β^{1-q} r^q / q`.
    pub fn hamiltonian_radial(&self, r: f64) -> f64 {
        let q = self.q();
        self.beta.powf(1.0 - q) * r.powf(q) / q
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ConvexCost for CostModel {
    fn lagrangian(&self, v: &[f64]) -> f64 {
        if self.alpha == 2.0 {
            return 0.5 * self.beta * v.iter().map(|x| x * x).sum::<f64>();
        }
        self.lagrangian_radial(norm(v))
    }

    fn grad_lagrangian(&self, v: &[f64]) -> Vec<f64> {
        let r = norm(v);
        if r == 0.0 {
            return vec![0.0; v.len()];
        }
        let scale = self.beta * r.powf(self.alpha - 2.0);
        v.iter().map(|x| scale * x).collect()
    }

    fn hamiltonian(&self, m: &[f64]) -> f64 {
        if self.alpha == 2.0 {
            return 0.5 / self.beta * m.iter().map(|x| x * x).sum::<f64>();
        }
        self.hamiltonian_radial(norm(m))
    }

    fn grad_hamiltonian(&self, m: &[f64]) -> Vec<f64> {
        let r = norm(m);
        // |m|^{q-2} is singular at 0 when q < 2; the limit of ∇H is 0.
        if r == 0.0 {
            return vec![0.0; m.len()];
        }
        let q = self.q();
        let scale = self.beta.powf(1.0 - q) * r.powf(q - 2.0);
        m.iter().map(|x| scale * x).collect()
    }
}

/// `L(v)` for the given cost.
pub fn lagrangian(c: &CostModel, v: &[f64]) -> f64 {
    c.lagrangian(v)
}

/// `H(m)` for the given cost.
pub fn hamiltonian(c: &CostModel, m: &[f64]) -> f64 {
    c.hamiltonian(m)
}

/// `(∇L)⁻¹(m)`, the velocity whose cost gradient is `m`.
pub fn grad_l_inverse(c: &CostModel, m: &[f64]) -> Vec<f64> {
    c.grad_l_inverse(m)
}
