//! Exact optimal matching between equal-size, equal-weight point clouds.

use ndarray::{Array2, ArrayView2};

use crate::cost::ConvexCost;
use crate::measures::PointCloud;
use crate::{Error, Result};

/// Memory guard for the dense `n × n` cost matrix.
pub const MAX_DISCRETE_POINTS: usize = 4096;

/// A permutation `i ↦ perm[i]` and its mean cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    /// `(1/n) Σ c(x_i, y_{perm[i]})`.
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with row/column potentials, `O(n³)`.
/// Returns `perm` with row `i` assigned to column `perm[i]`.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::Shape(format!("cost matrix is {}x{}", n, cost.ncols())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Argument("cost matrix has non-finite entries".into()));
    }
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// `c(x_i, y_j) = L(y_j - x_i)` for every pair.
pub fn cost_matrix<C: ConvexCost>(a: ArrayView2<f64>, b: ArrayView2<f64>, cost: &C) -> Array2<f64> {
    let d = a.ncols();
    let mut diff = vec![0.0; d];
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        for k in 0..d {
            diff[k] = b[[j, k]] - a[[i, k]];
        }
        cost.lagrangian(&diff)
    })
}

/// Exact Monge solution between two uniform empirical measures of equal size.
pub fn exact_discrete_ot<C: ConvexCost>(cloud_a: &PointCloud, cloud_b: &PointCloud, cost: &C) -> Result<Assignment> {
    let n = cloud_a.len();
    if cloud_b.len() != n {
        return Err(Error::Argument(format!(
            "clouds must have equal size, got {n} and {}",
            cloud_b.len()
        )));
    }
    if cloud_a.dim() != cloud_b.dim() {
        return Err(Error::Shape("clouds differ in dimension".into()));
    }
    if n > MAX_DISCRETE_POINTS {
        return Err(Error::Argument(format!(
            "{n} points exceeds the exact solver limit of {MAX_DISCRETE_POINTS}"
        )));
    }
    let c = cost_matrix(cloud_a.points(), cloud_b.points(), cost);
    let perm = hungarian(c.view())?;
    let total_cost = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / n as f64;
    Ok(Assignment { perm, total_cost })
}

/// Displacement interpolation `(1 - t) x_i + t y_{perm[i]}`.
pub fn mccann_interpolate(cloud_a: &PointCloud, cloud_b: &PointCloud, assignment: &Assignment, t: f64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("time must lie in [0, 1], got {t}")));
    }
    let n = cloud_a.len();
    if cloud_b.len() != n || assignment.perm.len() != n || cloud_a.dim() != cloud_b.dim() {
        return Err(Error::Shape("clouds and assignment disagree in size".into()));
    }
    let a = cloud_a.points();
    let b = cloud_b.points();
    let out = Array2::from_shape_fn((n, cloud_a.dim()), |(i, k)| {
        let y = b[[assignment.perm[i], k]];
        if t == 1.0 {
            y
        } else {
            (1.0 - t) * a[[i, k]] + t * y
        }
    });
    PointCloud::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rows: &[[f64; 2]]) -> PointCloud {
        PointCloud::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Exhaustive minimum over all permutations (Heap's algorithm).
    fn brute_force(c: &Array2<f64>) -> f64 {
        let n = c.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>();
        let mut best = eval(&perm);
        let mut stack = vec![0usize; n];
        let mut i = 0;
        while i < n {
            if stack[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(stack[i], i);
                }
                best = best.min(eval(&perm));
                stack[i] += 1;
                i = 0;
            } else {
                stack[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn vertical_matching() {
        let a = cloud(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = cloud(&[[0.0, 1.0], [1.0, 1.0]]);
        let s = exact_discrete_ot(&a, &b, &CostModel::quadratic()).unwrap();
        assert_eq!(s.perm, vec![0, 1]);
        assert!((s.total_cost - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_permutation() {
        let a = cloud(&[[0.0, 0.0], [2.0, 0.0]]);
        let b = cloud(&[[2.0, 0.0], [0.0, 0.0]]);
        let s = exact_discrete_ot(&a, &b, &CostModel::quadratic()).unwrap();
        assert_eq!(s.perm, vec![1, 0]);
        assert_eq!(s.total_cost, 0.0);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for alpha in [1.5, 2.0] {
            let cost = CostModel::new(alpha, 1.0).unwrap();
            for _ in 0..10 {
                let n = rng.random_range(1..=7);
                let a = PointCloud::new(Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
                let b = PointCloud::new(Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
                let c = cost_matrix(a.points(), b.points(), &cost);
                let s = exact_discrete_ot(&a, &b, &cost).unwrap();
                let mut seen = s.perm.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((s.total_cost * n as f64 - brute_force(&c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmin_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = PointCloud::new(Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0))).unwrap();
        let b = PointCloud::new(Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0))).unwrap();
        let base = exact_discrete_ot(&a, &b, &CostModel::new(1.5, 1.0).unwrap()).unwrap();
        let scaled = exact_discrete_ot(&a, &b, &CostModel::new(1.5, 7.5).unwrap()).unwrap();
        assert_eq!(base.perm, scaled.perm);
        assert!((scaled.total_cost - 7.5 * base.total_cost).abs() < 1e-12);
    }

    #[test]
    fn mccann_endpoints_and_midpoint() {
        let a = cloud(&[[0.0, 0.0], [2.0, 0.0]]);
        let b = cloud(&[[3.0, 1.0], [-1.0, 1.0]]);
        let s = exact_discrete_ot(&a, &b, &CostModel::quadratic()).unwrap();
        assert_eq!(mccann_interpolate(&a, &b, &s, 0.0).unwrap(), a);
        let end = mccann_interpolate(&a, &b, &s, 1.0).unwrap();
        for i in 0..2 {
            assert_eq!(end.row(i), b.row(s.perm[i]));
        }
        let mid = mccann_interpolate(&a, &b, &s, 0.5).unwrap();
        for i in 0..2 {
            let expect: Vec<f64> = a.row(i).iter().zip(b.row(s.perm[i])).map(|(x, y)| 0.5 * (x + y)).collect();
            assert_eq!(mid.row(i), expect);
        }
        assert!(mccann_interpolate(&a, &b, &s, 1.2).is_err());
    }

    #[test]
    fn size_guards() {
        let a = cloud(&[[0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(exact_discrete_ot(&a, &b, &CostModel::quadratic()), Err(Error::Argument(_))));
    }
}
