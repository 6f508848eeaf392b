//! Closed-form quadratic transport between Gaussians.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

/// Optimal quadratic-cost transport between two Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOtSolution {
    /// `W₂²`, i.e. `E|T(x) - x|²` with no factor ½.
    pub squared_w2: f64,
    /// Linear part of the optimal map `T(x) = A x + b`; symmetric PSD.
    pub a: Array2<f64>,
    pub b: Array1<f64>,
}

impl GaussianOtSolution {
    /// Transport cost under `L(v) = |v|²/2`, i.e. `W₂²/2`.
    pub fn dynamic_cost(&self) -> f64 {
        0.5 * self.squared_w2
    }

    pub fn map(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.a.t()) + &self.b
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns.
pub fn symmetric_eigen(m: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape(format!("matrix is {}x{}, not square", n, m.ncols())));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for i in 0..n {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-10 * scale {
                return Err(Error::Argument("matrix is not symmetric".into()));
            }
        }
    }
    let mut a = m.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok((a.diag().to_owned(), v))
}

fn from_eigen(vals: &Array1<f64>, vecs: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let scaled = vecs * &vals.mapv(f);
    let out = scaled.dot(&vecs.t());
    // Symmetrize away rounding.
    (&out + &out.t()) * 0.5
}

/// Principal square root of a symmetric PSD matrix.
pub fn symmetric_sqrt(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if vals.iter().any(|&l| l < -1e-10 * scale.max(1.0)) {
        return Err(Error::Argument("matrix is not positive semi-definite".into()));
    }
    Ok(from_eigen(&vals, &vecs, |l| l.max(0.0).sqrt()))
}

fn check_gaussian(mean: ArrayView1<f64>, cov: ArrayView2<f64>, name: &str) -> Result<(Array1<f64>, Array2<f64>)> {
    let d = mean.len();
    if cov.dim() != (d, d) {
        return Err(Error::Shape(format!("{name}: covariance is {:?}, mean has {d} entries", cov.dim())));
    }
    let (vals, vecs) = symmetric_eigen(cov)?;
    let max = vals.iter().fold(0.0f64, |a, v| a.max(*v));
    if vals.iter().any(|&l| !(l > 1e-14 * max.max(1e-300))) {
        return Err(Error::Argument(format!("{name}: covariance is not positive definite")));
    }
    Ok((vals, vecs))
}

/// Bures formula for `N(m_a, Σ_a) → N(m_b, Σ_b)`:
///
/// ```text
/// W₂² = |m_a - m_b|² + tr(Σ_a + Σ_b - 2 (Σ_a^{½} Σ_b Σ_a^{½})^{½})
/// A   = Σ_a^{-½} (Σ_a^{½} Σ_b Σ_a^{½})^{½} Σ_a^{-½},   b = m_b - A m_a
/// ```
pub fn gaussian_w2(
    mean_a: ArrayView1<f64>,
    cov_a: ArrayView2<f64>,
    mean_b: ArrayView1<f64>,
    cov_b: ArrayView2<f64>,
) -> Result<GaussianOtSolution> {
    if mean_a.len() != mean_b.len() {
        return Err(Error::Shape("gaussians differ in dimension".into()));
    }
    let (vals_a, vecs_a) = check_gaussian(mean_a, cov_a, "source")?;
    check_gaussian(mean_b, cov_b, "target")?;
    let sqrt_a = from_eigen(&vals_a, &vecs_a, f64::sqrt);
    let inv_sqrt_a = from_eigen(&vals_a, &vecs_a, |l| 1.0 / l.sqrt());
    let inner = sqrt_a.dot(&cov_b).dot(&sqrt_a);
    let inner = (&inner + &inner.t()) * 0.5;
    let cross = symmetric_sqrt(inner.view())?;
    let shift = &mean_a - &mean_b;
    let trace = cov_a.diag().sum() + cov_b.diag().sum() - 2.0 * cross.diag().sum();
    let squared_w2 = (shift.dot(&shift) + trace).max(0.0);
    let a = inv_sqrt_a.dot(&cross).dot(&inv_sqrt_a);
    let a = (&a + &a.t()) * 0.5;
    let b = &mean_b - &a.dot(&mean_a);
    Ok(GaussianOtSolution { squared_w2, a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
        let m = Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0));
        m.dot(&m.t()) + Array2::<f64>::eye(d) * 0.3
    }

    #[test]
    fn translation() {
        let id = Array2::<f64>::eye(2);
        let s = gaussian_w2(array![0.0, 0.0].view(), id.view(), array![3.0, 0.0].view(), id.view()).unwrap();
        assert!((s.squared_w2 - 9.0).abs() < 1e-12);
        assert!((s.dynamic_cost() - 4.5).abs() < 1e-12);
        assert!((&s.a - &id).iter().all(|v| v.abs() < 1e-12));
        assert!((s.b[0] - 3.0).abs() < 1e-12 && s.b[1].abs() < 1e-12);
    }

    #[test]
    fn identical_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cov = random_spd(&mut rng, 3);
        let m = array![1.0, -2.0, 0.5];
        let s = gaussian_w2(m.view(), cov.view(), m.view(), cov.view()).unwrap();
        assert!(s.squared_w2.abs() < 1e-10);
        assert!((&s.a - &Array2::<f64>::eye(3)).iter().all(|v| v.abs() < 1e-8));
        assert!(s.b.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn commuting_diagonal_covariances() {
        let ca = array![[1.0, 0.0], [0.0, 4.0]];
        let cb = array![[4.0, 0.0], [0.0, 1.0]];
        let z = array![0.0, 0.0];
        let s = gaussian_w2(z.view(), ca.view(), z.view(), cb.view()).unwrap();
        assert!((s.squared_w2 - 2.0).abs() < 1e-12);
        assert!((s.a[[0, 0]] - 2.0).abs() < 1e-12 && (s.a[[1, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetry_and_pushforward_exactness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 1..=5 {
            let ca = random_spd(&mut rng, d);
            let cb = random_spd(&mut rng, d);
            let ma = Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0));
            let mb = Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0));
            let ab = gaussian_w2(ma.view(), ca.view(), mb.view(), cb.view()).unwrap();
            let ba = gaussian_w2(mb.view(), cb.view(), ma.view(), ca.view()).unwrap();
            assert!((ab.squared_w2 - ba.squared_w2).abs() < 1e-9);
            let pushed = ab.a.dot(&ca).dot(&ab.a.t());
            assert!((&pushed - &cb).iter().all(|v| v.abs() < 1e-8));
            assert!((&(ab.a.dot(&ma) + &ab.b) - &mb).iter().all(|v| v.abs() < 1e-8));
            let (vals, _) = symmetric_eigen(ab.a.view()).unwrap();
            assert!(vals.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(&mut rng, 6);
        let (vals, vecs) = symmetric_eigen(m.view()).unwrap();
        let back = (&vecs * &vals).dot(&vecs.t());
        assert!((&back - &m).iter().all(|v| v.abs() < 1e-10));
        let r = symmetric_sqrt(m.view()).unwrap();
        assert!((&r.dot(&r) - &m).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn rejects_bad_covariances() {
        let z = array![0.0, 0.0];
        let singular = array![[1.0, 1.0], [1.0, 1.0]];
        let id = Array2::<f64>::eye(2);
        assert!(matches!(
            gaussian_w2(z.view(), singular.view(), z.view(), id.view()),
            Err(Error::Argument(_))
        ));
        let asym = array![[1.0, 0.5], [0.0, 1.0]];
        assert!(gaussian_w2(z.view(), id.view(), z.view(), asym.view()).is_err());
    }
}
