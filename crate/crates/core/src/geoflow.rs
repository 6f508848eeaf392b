//! Model state and geodesic pushforwards.
//!
//! The geodesic from `ρ_a` is represented by a single time-independent
//! field `F`: the measure at time `t` is `(Id + tF)♯ρ_a`, so every particle
//! moves on a straight line.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::cost::CostModel;
use crate::diffcore::Mlp;
use crate::measures::PointCloud;
use crate::{Error, Result};

/// Affine map `P(x) = σx + μ` applied to the source before training.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    sigma: f64,
    mu: Array1<f64>,
}

impl Preconditioner {
    pub fn new(sigma: f64, mu: Array1<f64>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Argument(format!("preconditioner scale must be > 0, got {sigma}")));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("preconditioner shift is not finite".into()));
        }
        Ok(Preconditioner { sigma, mu })
    }

    pub fn identity(dim: usize) -> Self {
        Preconditioner {
            sigma: 1.0,
            mu: Array1::zeros(dim),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_identity(&self) -> bool {
        self.sigma == 1.0 && self.mu.iter().all(|v| *v == 0.0)
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.mapv(|v| v * self.sigma) + &self.mu
    }

    pub fn invert(&self, y: ArrayView2<f64>) -> Array2<f64> {
        (&y - &self.mu).mapv(|v| v / self.sigma)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        PointCloud::new(self.apply(cloud.points()))
    }
}

/// Anything that maps a batch of `d`-dim points to `d`-dim velocities.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl VectorField for Mlp {
    fn dim(&self) -> usize {
        self.in_dim()
    }

    fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.in_dim() != self.out_dim() {
            return Err(Error::Shape(format!(
                "field network maps {} -> {} dims",
                self.in_dim(),
                self.out_dim()
            )));
        }
        Mlp::eval_batch(self, x)
    }
}

/// Which way a field trained against a preconditioned source transports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    /// Trained from `P♯ρ_a` to `ρ_b`; recovered as `F̂∘P + P - Id`.
    Forward,
    /// Trained from `ρ_b` to `P♯ρ_a`; recovered as `P⁻¹∘(Id + Ĝ) - Id`.
    Backward,
}

/// A raw field network with the preconditioner folded in.
#[derive(Debug, Clone, Copy)]
pub struct ComposedField<'a> {
    net: &'a Mlp,
    precond: &'a Preconditioner,
    role: FieldRole,
}

impl<'a> ComposedField<'a> {
    pub fn new(net: &'a Mlp, precond: &'a Preconditioner, role: FieldRole) -> Self {
        ComposedField { net, precond, role }
    }
}

impl VectorField for ComposedField<'_> {
    fn dim(&self) -> usize {
        self.net.in_dim()
    }

    fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.precond.is_identity() {
            return VectorField::eval_batch(self.net, x);
        }
        match self.role {
            FieldRole::Forward => {
                let px = self.precond.apply(x);
                let f = VectorField::eval_batch(self.net, px.view())?;
                Ok(f + &px - &x)
            }
            FieldRole::Backward => {
                let g = VectorField::eval_batch(self.net, x)?;
                let landed = &x + &g;
                Ok(self.precond.invert(landed.view()) - &x)
            }
        }
    }
}

/// `F* = F̂∘P + P - Id`, i.e. `F*(x) = F̂(σx + μ) + (σ - 1)x + μ`.
pub fn compose_preconditioner<'a>(f_hat: &'a Mlp, p: &'a Preconditioner) -> ComposedField<'a> {
    ComposedField::new(f_hat, p, FieldRole::Forward)
}

/// The pushed cloud `(Id + tF)♯` of a sample set at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicSnapshot {
    pub t: f64,
    pub points: PointCloud,
}

/// Evaluates a field at a single point.
pub fn velocity(field: &dyn VectorField, x: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(field.eval_batch(view)?.into_raw_vec_and_offset().0)
}

/// Moves every row `x_i` to `x_i + t F(x_i)`, preserving order.
pub fn push_samples(field: &dyn VectorField, cloud: &PointCloud, t: f64) -> Result<GeodesicSnapshot> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("time must lie in [0, 1], got {t}")));
    }
    let x = cloud.points();
    let v = field.eval_batch(x)?;
    let moved = &x + &(v * t);
    Ok(GeodesicSnapshot {
        t,
        points: PointCloud::new(moved)?,
    })
}

/// Stacks `(x, t)` rows for a potential network.
pub fn with_time(x: ArrayView2<f64>, t: &[f64]) -> Array2<f64> {
    let tc = ArrayView2::from_shape((t.len(), 1), t).expect("column of times");
    concatenate(Axis(1), &[x, tc]).expect("matching row counts")
}

/// `Φ(x, t)` for a single point.
pub fn phi_eval(phi: &Mlp, x: &[f64], t: f64) -> Result<f64> {
    if phi.out_dim() != 1 {
        return Err(Error::Shape(format!("potential network has {} outputs", phi.out_dim())));
    }
    if x.len() + 1 != phi.in_dim() {
        return Err(Error::Shape(format!(
            "potential expects {} spatial dims, got {}",
            phi.in_dim() - 1,
            x.len()
        )));
    }
    let mut input = x.to_vec();
    input.push(t);
    Ok(crate::diffcore::mlp_forward(phi, &input)?[0])
}

/// Network sizes for the four players.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub field_width: usize,
    pub field_hidden: usize,
    pub phi_width: usize,
    pub phi_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            field_width: 48,
            field_hidden: 5,
            phi_width: 48,
            phi_hidden: 6,
        }
    }
}

/// Forward/backward fields, their dual potentials, and the preconditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoState {
    pub f_net: Mlp,
    pub g_net: Mlp,
    pub phi_f: Mlp,
    pub phi_g: Mlp,
    pub precond: Preconditioner,
    pub cost: CostModel,
    dim: usize,
}

impl GeoState {
    pub fn init<R: Rng + ?Sized>(dim: usize, cost: CostModel, arch: Architecture, rng: &mut R) -> Result<Self> {
        let f_net = Mlp::new(dim, arch.field_width, arch.field_hidden, dim, rng)?;
        let g_net = Mlp::new(dim, arch.field_width, arch.field_hidden, dim, rng)?;
        let phi_f = Mlp::new(dim + 1, arch.phi_width, arch.phi_hidden, 1, rng)?;
        let phi_g = Mlp::new(dim + 1, arch.phi_width, arch.phi_hidden, 1, rng)?;
        GeoState::from_parts(f_net, g_net, phi_f, phi_g, Preconditioner::identity(dim), cost)
    }

    pub fn from_parts(
        f_net: Mlp,
        g_net: Mlp,
        phi_f: Mlp,
        phi_g: Mlp,
        precond: Preconditioner,
        cost: CostModel,
    ) -> Result<Self> {
        let dim = f_net.in_dim();
        for (name, net) in [("F", &f_net), ("G", &g_net)] {
            if net.in_dim() != dim || net.out_dim() != dim {
                return Err(Error::Shape(format!(
                    "{name} maps {} -> {}, expected {dim} -> {dim}",
                    net.in_dim(),
                    net.out_dim()
                )));
            }
        }
        for (name, net) in [("Φ_F", &phi_f), ("Φ_G", &phi_g)] {
            if net.in_dim() != dim + 1 || net.out_dim() != 1 {
                return Err(Error::Shape(format!(
                    "{name} maps {} -> {}, expected {} -> 1",
                    net.in_dim(),
                    net.out_dim(),
                    dim + 1
                )));
            }
        }
        if precond.dim() != dim {
            return Err(Error::Shape(format!(
                "preconditioner has dimension {}, state has {dim}",
                precond.dim()
            )));
        }
        Ok(GeoState {
            f_net,
            g_net,
            phi_f,
            phi_g,
            precond,
            cost,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `ρ_a → ρ_b` field in original coordinates.
    pub fn forward_field(&self) -> ComposedField<'_> {
        ComposedField::new(&self.f_net, &self.precond, FieldRole::Forward)
    }

    /// `ρ_b → ρ_a` field in original coordinates.
    pub fn backward_field(&self) -> ComposedField<'_> {
        ComposedField::new(&self.g_net, &self.precond, FieldRole::Backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Dense;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A d -> d network whose output layer is zero except for its bias.
    fn constant_field(m: &[f64]) -> Mlp {
        let d = m.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(d, 4, 2, d, &mut rng).unwrap();
        let last = net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias = Array1::from(m.to_vec());
        net
    }

    fn cloud(rows: &[Vec<f64>]) -> PointCloud {
        PointCloud::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let f = constant_field(&[0.0, 0.0]);
        assert_eq!(velocity(&f, &[3.0, -1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn velocity_matches_scalar_loop_and_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Mlp::new(2, 48, 5, 2, &mut rng).unwrap();
        let x = [0.3, -1.2];
        let v = velocity(&f, &x).unwrap();
        let mut z = x.to_vec();
        for (k, l) in f.layers().iter().enumerate() {
            z = (0..l.out_dim())
                .map(|i| {
                    let a = l.bias[i] + (0..l.in_dim()).map(|j| l.weight[[i, j]] * z[j]).sum::<f64>();
                    if k + 1 < f.layers().len() { a.tanh() } else { a }
                })
                .collect();
        }
        for (a, b) in v.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(velocity(&f, &[1e8, -1e8]).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn push_examples() {
        let src = cloud(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let f = constant_field(&[2.0, -4.0]);
        assert_eq!(push_samples(&f, &src, 0.0).unwrap().points, src);
        let one = push_samples(&f, &src, 1.0).unwrap();
        let half = push_samples(&f, &src, 0.5).unwrap();
        for i in 0..3 {
            assert_eq!(one.points.row(i)[0], src.row(i)[0] + 2.0);
            assert_eq!(one.points.row(i)[1], src.row(i)[1] - 4.0);
            assert_eq!(half.points.row(i)[0], src.row(i)[0] + 1.0);
            assert_eq!(half.points.row(i)[1], src.row(i)[1] - 2.0);
        }
        assert!(matches!(push_samples(&f, &src, 1.5), Err(Error::Argument(_))));
        assert!(matches!(push_samples(&f, &src, -0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn push_is_affine_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Mlp::new(3, 10, 3, 3, &mut rng).unwrap();
        let src = PointCloud::new(Array2::from_shape_fn((25, 3), |(i, j)| (i as f64 * 0.37 + j as f64).sin())).unwrap();
        let s0 = push_samples(&f, &src, 0.0).unwrap().points;
        let s1 = push_samples(&f, &src, 1.0).unwrap().points;
        for t in [0.1, 0.25, 0.5, 0.9] {
            let st = push_samples(&f, &src, t).unwrap().points;
            let interp = s0.points().mapv(|v| v * (1.0 - t)) + s1.points().mapv(|v| v * t);
            for (a, b) in st.points().iter().zip(interp.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(st.len(), src.len());
        }
    }

    #[test]
    fn composition_examples() {
        let zero = constant_field(&[0.0, 0.0]);
        let p = Preconditioner::new(2.0, array![1.0, -3.0]).unwrap();
        let composed = compose_preconditioner(&zero, &p);
        let v = velocity(&composed, &[0.5, 2.0]).unwrap();
        assert_eq!(v, vec![0.5 + 1.0, 2.0 - 3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Mlp::new(2, 8, 2, 2, &mut rng).unwrap();
        let id = Preconditioner::identity(2);
        let raw = VectorField::eval_batch(&f, array![[0.2, 0.3], [1.0, -1.0]].view()).unwrap();
        let comp = compose_preconditioner(&f, &id)
            .eval_batch(array![[0.2, 0.3], [1.0, -1.0]].view())
            .unwrap();
        assert_eq!(raw, comp);
    }

    #[test]
    fn backward_composition_inverts_forward_for_affine_maps() {
        // Forward raw field shifts by +c in preconditioned space; backward by -c.
        let c = [0.7, -0.2];
        let f = constant_field(&c);
        let g = constant_field(&[-c[0], -c[1]]);
        let p = Preconditioner::new(1.5, array![2.0, 1.0]).unwrap();
        let fwd = ComposedField::new(&f, &p, FieldRole::Forward);
        let bwd = ComposedField::new(&g, &p, FieldRole::Backward);
        let x = array![[0.1, 0.4], [-2.0, 3.0]];
        let y = &x + &fwd.eval_batch(x.view()).unwrap();
        let back = &y + &bwd.eval_batch(y.view()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn preconditioner_round_trip() {
        let p = Preconditioner::new(0.3, array![5.0, -1.0]).unwrap();
        let x = array![[1.0, 2.0], [-7.5, 0.001]];
        let back = p.invert(p.apply(x.view()).view());
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(Preconditioner::new(0.0, array![0.0]).is_err());
    }

    #[test]
    fn phi_eval_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut phi = Mlp::new(3, 6, 2, 1, &mut rng).unwrap();
        let v = phi_eval(&phi, &[0.1, 0.2], 0.5).unwrap();
        let direct = crate::diffcore::mlp_forward(&phi, &[0.1, 0.2, 0.5]).unwrap()[0];
        assert_eq!(v, direct);
        assert!(phi_eval(&phi, &[1e9, -1e9], 1.0).unwrap().is_finite());
        assert!(matches!(phi_eval(&phi, &[0.1], 0.5), Err(Error::Shape(_))));
        let last: &mut Dense = phi.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        assert_eq!(phi_eval(&phi, &[4.0, -2.0], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn state_validates_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = GeoState::init(2, CostModel::quadratic(), Architecture::default(), &mut rng).unwrap();
        assert_eq!(s.phi_f.in_dim(), 3);
        assert_eq!(s.f_net.n_hidden(), 5);
        assert_eq!(s.phi_g.n_hidden(), 6);
        let bad = GeoState::from_parts(
            s.f_net.clone(),
            s.g_net.clone(),
            s.f_net.clone(),
            s.phi_g.clone(),
            Preconditioner::identity(2),
            CostModel::quadratic(),
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
    }
}
