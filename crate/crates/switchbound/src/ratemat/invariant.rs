//! Invariant measures of finite irreducible generators via an augmented
//! least-squares solve, plus the strong-connectivity check that guards it.

use nalgebra::{DMatrix, DVector};

use super::{ProbabilityVector, RateMatError, RateMatrix, MAX_DENSE_STATES};

/// Strong connectivity of the positive-rate digraph (threshold: rate > 0
/// exactly). A digraph is strongly connected iff every node is reachable
/// from node 0 and node 0 is reachable from every node.
pub fn is_irreducible(q: &RateMatrix) -> bool {
    let n = q.n_states();
    if n <= 1 {
        return true;
    }
    let reach = |reverse: bool| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            let (lo, hi) = (
                i.saturating_sub(q.bandwidth()),
                (i + q.bandwidth()).min(n - 1),
            );
            for j in lo..=hi {
                if j == i || seen[j] {
                    continue;
                }
                let r = if reverse { q.rate(j, i) } else { q.rate(i, j) };
                if r > 0.0 {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count
    };
    reach(false) == n && reach(true) == n
}

/// Unique invariant probability measure `π` with `πQ = 0`, solved from the
/// augmented system `[Qᵀ; 1ᵀ] πᵀ = [0; 1]` by SVD least squares. The
/// residual `‖πQ‖₁` must come out below 1e-10.
pub fn invariant_measure(q: &RateMatrix) -> Result<ProbabilityVector, RateMatError> {
    let n = q.n_states();
    if n > MAX_DENSE_STATES {
        return Err(RateMatError::TooLarge(n));
    }
    if !is_irreducible(q) {
        return Err(RateMatError::Reducible);
    }
    let mut a = DMatrix::<f64>::zeros(n + 1, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = if i == j { q.diag(i) } else { q.rate(i, j) };
        }
        a[(n, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n + 1);
    b[n] = 1.0;
    let svd = a.svd(true, true);
    let pi = svd
        .solve(&b, 1e-14)
        .map_err(|e| RateMatError::SolveFailed(e.to_string()))?;

    let mut w: Vec<f64> = pi.iter().copied().collect();
    for v in &mut w {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0;
        }
    }
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return Err(RateMatError::SolveFailed("degenerate solution".into()));
    }
    for v in &mut w {
        *v /= sum;
    }

    let mut residual = 0.0f64;
    for j in 0..n {
        let mut col = 0.0;
        for (i, wi) in w.iter().enumerate() {
            let entry = if i == j { q.diag(i) } else { q.rate(i, j) };
            col += wi * entry;
        }
        residual += col.abs();
    }
    if residual > 1e-10 {
        return Err(RateMatError::SolveFailed(format!(
            "residual ‖πQ‖₁ = {residual:e} exceeds 1e-10"
        )));
    }
    ProbabilityVector::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratemat::transition_semigroup;
    use approx::assert_abs_diff_eq;

    #[test]
    fn symmetric_two_state_is_uniform() {
        let q = RateMatrix::from_offdiag_fn(2, 1, |_, _| 1.0).unwrap();
        let pi = invariant_measure(&q).unwrap();
        assert_abs_diff_eq!(pi.weights()[0], 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(pi.weights()[1], 0.5, epsilon = 1e-13);
    }

    #[test]
    fn example_upper_envelope_measure() {
        // q̄ = [[-5,2,3],[1,-4,3],[1,1,-2]] has invariant measure (1/6, 7/30, 3/5)
        let rows = vec![
            vec![-5.0, 2.0, 3.0],
            vec![1.0, -4.0, 3.0],
            vec![1.0, 1.0, -2.0],
        ];
        let q = RateMatrix::from_dense_rows(&rows).unwrap();
        let pi = invariant_measure(&q).unwrap();
        assert_abs_diff_eq!(pi.weights()[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pi.weights()[1], 7.0 / 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pi.weights()[2], 3.0 / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn reducible_generator_is_rejected() {
        let q = RateMatrix::zero(2, 1);
        assert!(matches!(
            invariant_measure(&q),
            Err(RateMatError::Reducible)
        ));
        // one-way chain: 0 -> 1 only
        let q = RateMatrix::from_offdiag_fn(2, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }).unwrap();
        assert!(!is_irreducible(&q));
    }

    #[test]
    fn random_banded_generator_has_tiny_residual_and_fixed_point() {
        let q = RateMatrix::from_offdiag_fn(4, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.2 + 0.1)
            .unwrap();
        let pi = invariant_measure(&q).unwrap();
        // π is a fixed point of the semigroup
        for &t in &[0.1, 1.0, 10.0] {
            let p = transition_semigroup(&q, t).unwrap();
            for j in 0..4 {
                let mut pj = 0.0;
                for i in 0..4 {
                    pj += pi.weights()[i] * p[(i, j)];
                }
                assert_abs_diff_eq!(pj, pi.weights()[j], epsilon = 1e-9);
            }
        }
    }
}
