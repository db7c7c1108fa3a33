//! Coordinator-side ADMM updates: the capacity projection, the scaled dual
//! step, and the convergence residuals.
//!
//! All per-slice quantities are indexed `[slice][slot]`. Slots never interact
//! here, so every update is applied slot by slot.

use crate::error::{Error, Result};

/// Auxiliary targets `z` and scaled duals `y`, both `[slice][slot]`.
///
/// Only the per-slot sum of `z` is constrained; individual components may go
/// negative while the duals reconcile them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmVariables {
    pub z: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl AdmmVariables {
    /// Per-slice targets `d = z - y` handed to the slave solvers.
    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.z
            .iter()
            .zip(&self.y)
            .map(|(z, y)| z.iter().zip(y).map(|(z, y)| z - y).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// `sum_t sum_i |x_sum - z + y|`, the stopping expression of the DeepSlicing loop.
    pub algorithm_residual: f64,
    /// `sum_t sum_i |x_sum - z|`, the consensus violation.
    pub primal_residual: f64,
}

/// Euclidean projection of `c` onto `{z : lo <= sum(z) <= hi}`.
///
/// The returned vector's floating-point sum is guaranteed to lie inside the
/// slab, which makes the projection exactly idempotent.
pub fn project_slab(c: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if c.is_empty() {
        return Err(Error::InvalidArgument("empty vector".into()));
    }
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(format!("lo {lo} > hi {hi}")));
    }
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    let total: f64 = c.iter().sum();
    if total >= lo && total <= hi {
        return Ok(c.to_vec());
    }
    let n = c.len() as f64;
    let (bound, sign) = if total > hi { (hi, 1.0) } else { (lo, -1.0) };
    let shift = (total - bound) / n;
    let mut z: Vec<f64> = c.iter().map(|v| v - shift).collect();

    // Rounding can leave the sum a few ulps outside the slab; push it back in.
    let scale = z.iter().fold(bound.abs(), |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for _ in 0..64 {
        let s: f64 = z.iter().sum();
        let excess = sign * (s - bound);
        if excess <= 0.0 {
            break;
        }
        let nudge = (excess / n).max(2.0 * f64::EPSILON * scale);
        z.iter_mut().for_each(|v| *v -= sign * nudge);
    }
    Ok(z)
}

fn check_same_shape(name: &str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Shape(format!("{name}: operands differ in shape")));
    }
    Ok(())
}

/// Capacity-constrained z-update: for every slot, projects `x_sum + y` onto
/// `0 <= sum_i z_i <= r_tot`.
pub fn solve_master(x_sums: &[Vec<f64>], y: &[Vec<f64>], r_tot: f64) -> Result<Vec<Vec<f64>>> {
    check_same_shape("solve_master", x_sums, y)?;
    if x_sums.is_empty() {
        return Err(Error::Shape("solve_master: no slices".into()));
    }
    let horizon = x_sums[0].len();
    if x_sums.iter().any(|s| s.len() != horizon) {
        return Err(Error::Shape("solve_master: ragged slot dimension".into()));
    }
    let mut z = vec![vec![0.0; horizon]; x_sums.len()];
    for t in 0..horizon {
        let c: Vec<f64> = x_sums.iter().zip(y).map(|(x, y)| x[t] + y[t]).collect();
        let zt = project_slab(&c, 0.0, r_tot)?;
        for (zi, v) in z.iter_mut().zip(zt) {
            zi[t] = v;
        }
    }
    Ok(z)
}

/// Scaled dual step `y + (x_sum - z)`.
pub fn update_duals(
    y: &[Vec<f64>],
    x_sums: &[Vec<f64>],
    z: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    check_same_shape("update_duals", y, x_sums)?;
    check_same_shape("update_duals", y, z)?;
    Ok(y.iter()
        .zip(x_sums)
        .zip(z)
        .map(|((y, x), z)| {
            y.iter()
                .zip(x)
                .zip(z)
                .map(|((y, x), z)| y + (x - z))
                .collect()
        })
        .collect())
}

pub fn residual(x_sums: &[Vec<f64>], z: &[Vec<f64>], y: &[Vec<f64>]) -> Result<ResidualReport> {
    check_same_shape("residual", x_sums, z)?;
    check_same_shape("residual", x_sums, y)?;
    let mut report = ResidualReport {
        algorithm_residual: 0.0,
        primal_residual: 0.0,
    };
    for ((x, z), y) in x_sums.iter().zip(z).zip(y) {
        for ((x, z), y) in x.iter().zip(z).zip(y) {
            report.algorithm_residual += (x - z + y).abs();
            report.primal_residual += (x - z).abs();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::slab_projection_qp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn feasible_point_is_returned() {
        assert_eq!(project_slab(&[10.0, 20.0], 0.0, 100.0).unwrap(), vec![10.0, 20.0]);
    }

    #[test]
    fn projection_examples_agree_with_qp() {
        // Expected values from the dual projected-gradient QP oracle.
        let cases: [(&[f64], &[f64]); 2] = [
            (&[30.0, 40.0, 50.0], &[70.0 / 3.0, 100.0 / 3.0, 130.0 / 3.0]),
            (&[-5.0, -10.0], &[2.5, -2.5]),
        ];
        for (c, expected) in cases {
            let z = project_slab(c, 0.0, 100.0).unwrap();
            let qp = slab_projection_qp(c, 0.0, 100.0, 1e-10);
            assert!(close(&z, expected, 1e-12), "{z:?}");
            assert!(close(&z, &qp, 1e-8), "{z:?} vs {qp:?}");
        }
    }

    #[test]
    fn projection_rejects_inverted_slab() {
        assert!(project_slab(&[1.0], 2.0, 1.0).is_err());
        assert!(project_slab(&[], 0.0, 1.0).is_err());
    }

    #[test]
    fn master_examples() {
        let z = solve_master(&[vec![10.0], vec![20.0]], &[vec![0.0], vec![0.0]], 100.0).unwrap();
        assert_eq!(z, vec![vec![10.0], vec![20.0]]);
        let z = solve_master(&[vec![60.0], vec![60.0]], &[vec![0.0], vec![0.0]], 100.0).unwrap();
        assert_eq!(z, vec![vec![50.0], vec![50.0]]);
        assert!(solve_master(&[vec![1.0]], &[vec![1.0, 2.0]], 100.0).is_err());
    }

    #[test]
    fn master_slots_are_independent() {
        let xs = vec![vec![60.0, 5.0], vec![70.0, -3.0], vec![1.0, 2.0]];
        let ys = vec![vec![0.5, 1.0], vec![-2.0, 0.0], vec![3.0, 0.25]];
        let both = solve_master(&xs, &ys, 100.0).unwrap();
        for t in 0..2 {
            let x1: Vec<Vec<f64>> = xs.iter().map(|v| vec![v[t]]).collect();
            let y1: Vec<Vec<f64>> = ys.iter().map(|v| vec![v[t]]).collect();
            let single = solve_master(&x1, &y1, 100.0).unwrap();
            for i in 0..3 {
                assert_eq!(both[i][t], single[i][0]);
            }
        }
    }

    #[test]
    fn dual_update_examples() {
        assert_eq!(update_duals(&[vec![2.0]], &[vec![50.0]], &[vec![45.0]]).unwrap(), vec![vec![7.0]]);
        assert_eq!(update_duals(&[vec![0.0]], &[vec![8.5]], &[vec![8.5]]).unwrap(), vec![vec![0.0]]);
        assert_eq!(update_duals(&[vec![-1.0]], &[vec![10.0]], &[vec![12.0]]).unwrap(), vec![vec![-3.0]]);
        assert!(update_duals(&[vec![0.0]], &[vec![1.0], vec![2.0]], &[vec![0.0]]).is_err());
    }

    #[test]
    fn residual_examples() {
        let r = residual(&[vec![0.0]], &[vec![0.0]], &[vec![0.0]]).unwrap();
        assert_eq!((r.algorithm_residual, r.primal_residual), (0.0, 0.0));
        let r = residual(&[vec![5.0]], &[vec![5.0]], &[vec![3.0]]).unwrap();
        assert_eq!((r.algorithm_residual, r.primal_residual), (3.0, 0.0));
        let r = residual(&[vec![5.0]], &[vec![4.0]], &[vec![0.0]]).unwrap();
        assert_eq!((r.algorithm_residual, r.primal_residual), (1.0, 1.0));
    }

    #[test]
    fn projection_beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=10);
            let hi = rng.gen_range(0.0..200.0);
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-200.0..200.0)).collect();
            let z = project_slab(&c, 0.0, hi).unwrap();
            let dist = |v: &[f64]| -> f64 {
                c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            };
            let best = dist(&z);
            for _ in 0..100 {
                let mut f: Vec<f64> = (0..n).map(|_| rng.gen_range(-200.0..200.0)).collect();
                let s: f64 = f.iter().sum();
                let target = rng.gen_range(0.0..=hi);
                let shift = (s - target) / n as f64;
                f.iter_mut().for_each(|v| *v -= shift);
                assert!(best <= dist(&f) + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(
            c in proptest::collection::vec(-500.0..500.0f64, 1..12),
            hi in 0.0..300.0f64,
        ) {
            let once = project_slab(&c, 0.0, hi).unwrap();
            let twice = project_slab(&once, 0.0, hi).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn master_output_is_feasible(
            xs in proptest::collection::vec(-300.0..300.0f64, 1..10),
            ys in proptest::collection::vec(-50.0..50.0f64, 10),
        ) {
            let x: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
            let y: Vec<Vec<f64>> = ys[..xs.len()].iter().map(|v| vec![*v]).collect();
            let z = solve_master(&x, &y, 100.0).unwrap();
            let s: f64 = z.iter().map(|v| v[0]).sum();
            prop_assert!((0.0..=100.0 + 1e-12).contains(&s));
        }

        #[test]
        fn dual_update_is_reproducible(y in -100.0..100.0f64, x in 0.0..100.0f64, z in -100.0..100.0f64) {
            let a = update_duals(&[vec![y]], &[vec![x]], &[vec![z]]).unwrap();
            let b = update_duals(&[vec![y]], &[vec![x]], &[vec![z]]).unwrap();
            prop_assert_eq!(a[0][0].to_bits(), b[0][0].to_bits());
            prop_assert_eq!(a[0][0].to_bits(), (y + (x - z)).to_bits());
        }
    }
}
