//! Discrete saddle-point losses and their exact parameter gradients.
//!
//! For one direction (source `a`, target `b`, field `F`, potential `Φ`):
//!
//! ```text
//! L_ab(Φ) = -(1/N) Σ_k [∂_t Φ(x_k, t_k) + H(∇_x Φ(x_k, t_k))]
//!           + (1/M) Σ_k [Φ(w^b_k, 1) - Φ(w^a_k, 0)],     x_k = z_k + t_k F(z_k)
//! ```
//!
//! Differentiating the Hamilton–Jacobi residual `r = ∂_t Φ + H(∇_x Φ)`
//! with respect to either the potential's parameters or the point `x`
//! only ever needs one second-order quantity. With `u = (∇H(∇_x Φ), 1)`
//! evaluated at the current point and then held fixed,
//!
//! ```text
//! ∇_ω r = ∇_ω [D_u Φ],      ∇_x r = x-block of ∇_{(x,t)} [D_u Φ]
//! ```
//!
//! which is the chain rule, not an approximation. Both come out of a single
//! [`Mlp::grad_of_jvp_batch`] pass.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::cost::ConvexCost;
use crate::diffcore::Mlp;
use crate::geoflow::{with_time, VectorField};
use crate::{Error, Result};

/// Interior samples `(z_k, t_k)` drawn from `source ⊗ U(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteriorBatch {
    z: Array2<f64>,
    t: Vec<f64>,
}

impl InteriorBatch {
    pub fn new(z: Array2<f64>, t: Vec<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::Argument("interior batch is empty".into()));
        }
        if z.nrows() != t.len() {
            return Err(Error::Shape(format!("{} points but {} times", z.nrows(), t.len())));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Argument(format!("interior time {bad} outside [0, 1]")));
        }
        Ok(InteriorBatch { z, t })
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `x_k = z_k + t_k F(z_k)`.
    pub fn pushed(&self, field: &Mlp) -> Result<Array2<f64>> {
        let v = VectorField::eval_batch(field, self.z.view())?;
        let tcol = ArrayView2::from_shape((self.t.len(), 1), &self.t).expect("column");
        Ok(&self.z + &(v * &tcol))
    }
}

/// Boundary samples from the source (paired with `t = 0`) and the target
/// (paired with `t = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryBatch {
    source: Array2<f64>,
    target: Array2<f64>,
}

impl BoundaryBatch {
    pub fn new(source: Array2<f64>, target: Array2<f64>) -> Result<Self> {
        if source.nrows() == 0 || target.nrows() == 0 {
            return Err(Error::Argument("boundary batch is empty".into()));
        }
        if source.nrows() != target.nrows() {
            return Err(Error::Shape(format!(
                "boundary sides differ in size: {} vs {}",
                source.nrows(),
                target.nrows()
            )));
        }
        if source.ncols() != target.ncols() {
            return Err(Error::Shape("boundary sides differ in dimension".into()));
        }
        Ok(BoundaryBatch { source, target })
    }

    pub fn source(&self) -> ArrayView2<'_, f64> {
        self.source.view()
    }

    pub fn target(&self) -> ArrayView2<'_, f64> {
        self.target.view()
    }

    pub fn len(&self) -> usize {
        self.source.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.source.nrows() == 0
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_ab: f64,
    pub l_ba: f64,
    pub k_reg: f64,
    pub w_ab: f64,
    pub w_ba: f64,
    pub hjb_residual_mean: f64,
}

/// Everything one evaluation of the potential loss can produce.
#[derive(Debug, Clone)]
pub struct PhiTerm {
    /// `L_ab` value.
    pub value: f64,
    /// Mean of `|∂_t Φ + H(∇_x Φ)|` over interior points.
    pub residual_abs_mean: f64,
    /// `∇_ω L_ab`, when requested.
    pub grad_phi: Option<Mlp>,
    /// `∂L_ab/∂x_k`, row by row, when requested.
    pub grad_points: Option<Array2<f64>>,
}

/// Which gradients [`phi_term`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wants {
    pub phi: bool,
    pub points: bool,
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{what} is not finite")))
    }
}

/// Evaluates `L_ab` at already-pushed interior points.
///
/// `boundary` may be omitted when only the interior contribution matters
/// (the field gradient does not see the boundary term).
pub fn phi_term<C: ConvexCost>(
    phi: &Mlp,
    points: ArrayView2<f64>,
    times: &[f64],
    boundary: Option<&BoundaryBatch>,
    cost: &C,
    wants: Wants,
) -> Result<PhiTerm> {
    let n = times.len();
    if n == 0 {
        return Err(Error::Argument("interior batch is empty".into()));
    }
    let d = points.ncols();
    if phi.in_dim() != d + 1 || phi.out_dim() != 1 {
        return Err(Error::Shape(format!(
            "potential maps {} -> {}, expected {} -> 1",
            phi.in_dim(),
            phi.out_dim(),
            d + 1
        )));
    }
    let input = with_time(points, times);
    let mut tape = phi.forward_batch(input.view())?;
    let grads_in = phi.backprop(&tape, Array2::ones((n, 1)).view(), None)?;

    let mut residual_sum = 0.0;
    let mut residual_abs = 0.0;
    let mut tangent = Array2::<f64>::zeros((n, d + 1));
    for (k, g) in grads_in.rows().into_iter().enumerate() {
        let g = g.as_slice().expect("contiguous row");
        let (gx, gt) = (&g[..d], g[d]);
        let r = gt + cost.hamiltonian(gx);
        residual_sum += r;
        residual_abs += r.abs();
        let mut row = tangent.row_mut(k);
        for (slot, v) in row.iter_mut().zip(cost.grad_hamiltonian(gx)) {
            *slot = v;
        }
        row[d] = 1.0;
    }
    let inv_n = 1.0 / n as f64;
    let mut value = -residual_sum * inv_n;
    check_finite("interior residual", value)?;

    let mut grad_phi = wants.phi.then(|| phi.zeros_like());
    let mut grad_points = None;
    if wants.phi || wants.points {
        phi.jvp_batch(&mut tape, tangent.view())?;
        let weights = Array1::from_elem(n, -inv_n);
        let gin = phi.grad_of_jvp_batch(&tape, weights.view(), grad_phi.as_mut())?;
        if wants.points {
            grad_points = Some(gin.slice(s![.., ..d]).to_owned());
        }
    }

    if let Some(b) = boundary {
        if b.source.ncols() != d {
            return Err(Error::Shape("boundary dimension differs from interior".into()));
        }
        let m = b.len();
        let stacked = concatenate(Axis(0), &[b.target.view(), b.source.view()]).expect("same width");
        let mut times = vec![1.0; m];
        times.extend(std::iter::repeat_n(0.0, m));
        let binput = with_time(stacked.view(), &times);
        let btape = phi.forward_batch(binput.view())?;
        let out = btape.output();
        let inv_m = 1.0 / m as f64;
        let target_mean: f64 = out.slice(s![..m, 0]).sum() * inv_m;
        let source_mean: f64 = out.slice(s![m.., 0]).sum() * inv_m;
        value += target_mean - source_mean;
        check_finite("boundary term", value)?;
        if let Some(gp) = grad_phi.as_mut() {
            let cot = Array2::from_shape_fn((2 * m, 1), |(i, _)| if i < m { inv_m } else { -inv_m });
            phi.backprop(&btape, cot.view(), Some(gp))?;
        }
    }
    if let Some(g) = &grad_phi {
        if !g.all_finite() {
            return Err(Error::Training("potential gradient is not finite".into()));
        }
    }
    Ok(PhiTerm {
        value,
        residual_abs_mean: residual_abs * inv_n,
        grad_phi,
        grad_points,
    })
}

/// `L_ab` and its gradient in the potential's parameters, `F` frozen.
pub fn loss_phi<C: ConvexCost>(
    phi: &Mlp,
    f_net: &Mlp,
    interior: &InteriorBatch,
    boundary: &BoundaryBatch,
    cost: &C,
) -> Result<(f64, Mlp)> {
    let x = interior.pushed(f_net)?;
    let term = phi_term(
        phi,
        x.view(),
        &interior.t,
        Some(boundary),
        cost,
        Wants {
            phi: true,
            points: false,
        },
    )?;
    Ok((term.value, term.grad_phi.expect("requested")))
}

/// Backpropagates `∂L/∂x_k` through `x_k = z_k + t_k F(z_k)` into `F`.
pub fn field_grad_from_points(
    f_net: &Mlp,
    interior: &InteriorBatch,
    grad_points: ArrayView2<f64>,
    into: &mut Mlp,
) -> Result<()> {
    let tape = f_net.forward_batch(interior.z.view())?;
    let tcol = ArrayView2::from_shape((interior.t.len(), 1), &interior.t).expect("column");
    let cot = &grad_points * &tcol;
    f_net.backprop(&tape, cot.view(), Some(into))?;
    Ok(())
}

/// Gradient of `L_ab` in the field's parameters, flowing through the pushed
/// interior points. The boundary term does not depend on `F`.
pub fn grad_field_from_phi_term<C: ConvexCost>(
    phi: &Mlp,
    f_net: &Mlp,
    interior: &InteriorBatch,
    cost: &C,
) -> Result<Mlp> {
    let x = interior.pushed(f_net)?;
    let term = phi_term(
        phi,
        x.view(),
        &interior.t,
        None,
        cost,
        Wants {
            phi: false,
            points: true,
        },
    )?;
    let mut grad = f_net.zeros_like();
    field_grad_from_points(f_net, interior, term.grad_points.expect("requested").view(), &mut grad)?;
    Ok(grad)
}

/// Cycle-consistency penalty with gradients for both fields.
#[derive(Debug, Clone)]
pub struct CycleLoss {
    pub value: f64,
    pub grad_f: Mlp,
    pub grad_g: Mlp,
}

/// `λ/K Σ|G(ξ + F(ξ)) + F(ξ)|²` over `samples_a` plus the mirrored term
/// over `samples_b`.
pub fn loss_cycle(
    f_net: &Mlp,
    g_net: &Mlp,
    samples_a: ArrayView2<f64>,
    samples_b: ArrayView2<f64>,
    lambda: f64,
) -> Result<CycleLoss> {
    if samples_a.nrows() == 0 || samples_b.nrows() == 0 {
        return Err(Error::Argument("cycle batch is empty".into()));
    }
    if samples_a.nrows() != samples_b.nrows() {
        return Err(Error::Shape(format!(
            "cycle batches differ in size: {} vs {}",
            samples_a.nrows(),
            samples_b.nrows()
        )));
    }
    let mut grad_f = f_net.zeros_like();
    let mut grad_g = g_net.zeros_like();
    let scale = lambda / samples_a.nrows() as f64;
    let mut value = cycle_half(samples_a, f_net, g_net, &mut grad_f, &mut grad_g, scale)?;
    value += cycle_half(samples_b, g_net, f_net, &mut grad_g, &mut grad_f, scale)?;
    check_finite("cycle loss", value)?;
    Ok(CycleLoss {
        value,
        grad_f,
        grad_g,
    })
}

/// `scale Σ|second(ξ + first(ξ)) + first(ξ)|²`, accumulating gradients.
fn cycle_half(
    xi: ArrayView2<f64>,
    first: &Mlp,
    second: &Mlp,
    grad_first: &mut Mlp,
    grad_second: &mut Mlp,
    scale: f64,
) -> Result<f64> {
    let t1 = first.forward_batch(xi)?;
    let y = t1.output().to_owned();
    let p = &xi + &y;
    let t2 = second.forward_batch(p.view())?;
    let e = &t2.output() + &y;
    let value = scale * e.iter().map(|v| v * v).sum::<f64>();
    if scale != 0.0 {
        let cot_e = e.mapv(|v| 2.0 * scale * v);
        let dp = second.backprop(&t2, cot_e.view(), Some(grad_second))?;
        let cot_y = cot_e + dp;
        first.backprop(&t1, cot_y.view(), Some(grad_first))?;
    }
    Ok(value)
}

/// Monte-Carlo transport cost `(1/M) Σ L(F(w_k))`.
pub fn wass_estimate<C: ConvexCost>(field: &dyn VectorField, samples: ArrayView2<f64>, cost: &C) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Argument("no samples for transport estimate".into()));
    }
    let v = field.eval_batch(samples)?;
    let total: f64 = v
        .rows()
        .into_iter()
        .map(|r| cost.lagrangian(r.as_slice().expect("contiguous row")))
        .sum();
    Ok(total / samples.nrows() as f64)
}
