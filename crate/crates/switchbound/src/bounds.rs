//! Closed-form bounds on the disagreement functional and on invariant
//! measures under generator perturbation, plus the stability-exponent
//! search for the moment-decay criterion.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::ratemat::{
    ergodicity_profile, inf_offdiag_row_diff, invariant_measure, is_irreducible, l1_diff_norm,
    transition_semigroup, tv_distance, ProbabilityVector, RateMatError, RateMatrix,
};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("time must be positive, got {0}")]
    BadTime(f64),
    #[error("generator must be irreducible")]
    NotIrreducible,
    #[error("p_max must lie in (0, 1], got {0}")]
    BadPMax(f64),
    #[error("no decay evidence by t_max = {t_max}: η({t_max}) = {eta_end}, sup η = {eta_max}")]
    NoDecayEvidence {
        t_max: f64,
        eta_end: f64,
        eta_max: f64,
    },
    #[error(transparent)]
    RateMat(#[from] RateMatError),
}

/// All disagreement bounds for one `(Q, Q̃, c₀, K₀, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBounds {
    pub lower_h3: f64,
    pub upper_h2: f64,
    pub upper_h25: f64,
    /// `N² t ‖Q-Q̃‖`, the superseded finite-state estimate, for contrast.
    pub legacy_d8: f64,
    // inputs echoed
    pub delta: f64,
    pub inf_row_diff: f64,
    pub m_const: f64,
    pub t: f64,
    pub n_states: usize,
    /// `lower_h3 ≤ upper_h2` sanity flag; false would indicate inconsistent
    /// `(c₀, K₀)` metadata.
    pub sane: bool,
}

/// `1 - (1 - e^{-x})/x` with the `x → 0` limit 0; increasing in `x ≥ 0`.
fn one_minus_relaxation(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < 1e-8 {
        // series: x/2 - x²/6
        x / 2.0 - x * x / 6.0
    } else {
        1.0 - (1.0 - (-x).exp()) / x
    }
}

/// Evaluates the disagreement bounds:
/// upper `1 - (1-e^{-δt})/(δt)` and `min(δt/2, 1)`, and lower
/// `r/(M+δ) · (1 - (1-e^{-(M+δ)t})/((M+δ)t))` with `M = 4c₀K₀`,
/// `δ = ‖Q-Q̃‖_{ℓ1}` and `r = inf_i Σ_{j≠i}|q_ij - q̃_ij|`.
pub fn theta_bounds(
    q: &RateMatrix,
    qt: &RateMatrix,
    c0: usize,
    k0: f64,
    t: f64,
) -> Result<ThetaBounds, BoundsError> {
    if !(t > 0.0) {
        return Err(BoundsError::BadTime(t));
    }
    let delta = l1_diff_norm(q, qt)?;
    let r = inf_offdiag_row_diff(q, qt)?;
    let m = 4.0 * c0 as f64 * k0;
    let upper_h2 = one_minus_relaxation(delta * t);
    let upper_h25 = (delta * t / 2.0).min(1.0);
    let lower_h3 = if r <= 0.0 {
        0.0
    } else {
        r / (m + delta) * one_minus_relaxation((m + delta) * t)
    };
    let n = q.n_states();
    Ok(ThetaBounds {
        lower_h3,
        upper_h2,
        upper_h25,
        legacy_d8: (n * n) as f64 * t * delta,
        delta,
        inf_row_diff: r,
        m_const: m,
        t,
        n_states: n,
        sane: lower_h3 <= upper_h2 + 1e-15,
    })
}

/// Classical semigroup perturbation bound driven by the e⁻¹-crossing time
/// of the ergodicity coefficient.
#[derive(Debug, Clone)]
pub struct MitrophanovBound {
    /// `τ₁ = inf{t : β(t) ≤ e⁻¹}` of the unperturbed generator; `None`
    /// means no crossing was found (bound is +∞).
    pub tau1: Option<f64>,
    /// `e τ₁ / (e - 1)`
    pub coefficient: f64,
    pub delta: f64,
    /// `coefficient · ‖Q-Q̃‖`; +∞ when τ₁ was not found.
    pub bound: f64,
}

/// Searches β(t) of `q` on doubling grids until it crosses e⁻¹ (giving τ₁
/// by bisection) or the horizon cap is reached.
pub fn mitrophanov_bound(
    q: &RateMatrix,
    qt: &RateMatrix,
) -> Result<MitrophanovBound, BoundsError> {
    let delta = l1_diff_norm(q, qt)?;
    let e = std::f64::consts::E;
    let mut horizon = 8.0;
    let mut tau1 = None;
    while horizon <= 1e6 {
        let grid: Vec<f64> = (0..=64).map(|k| k as f64 * horizon / 64.0).collect();
        let prof = ergodicity_profile(q, &grid)?;
        if let Some(t1) = prof.tau1 {
            tau1 = Some(t1);
            break;
        }
        if prof.min_beta > 0.99 && horizon >= 512.0 {
            // flat profile: reducible or near-reducible, no crossing coming
            break;
        }
        horizon *= 4.0;
    }
    match tau1 {
        Some(t1) => {
            let coefficient = e * t1 / (e - 1.0);
            Ok(MitrophanovBound {
                tau1: Some(t1),
                coefficient,
                delta,
                bound: coefficient * delta,
            })
        }
        None => Ok(MitrophanovBound {
            tau1: None,
            coefficient: f64::INFINITY,
            delta,
            bound: if delta == 0.0 { 0.0 } else { f64::INFINITY },
        }),
    }
}

/// Invariant-measure perturbation bound with a numerically constructed
/// common envelope `η_t`.
#[derive(Debug, Clone)]
pub struct InvariantPerturbation {
    pub bound: f64,
    pub measured: f64,
    pub eta_integral: f64,
    /// fitted exponential tail rate of η beyond `t_max`
    pub tail_rate: f64,
    pub delta: f64,
}

/// Builds `η_t = max(‖P_t(i0,·)-π‖, ‖P̃_t(i0,·)-π̃‖)` on `[0, t_max]`
/// (trapezoid with step `dt`, exponential tail fitted on the last decade of
/// decay) and returns `2√2 (∫η)^{1/2} ‖Q-Q̃‖^{1/2}` next to the directly
/// measured `‖π-π̃‖`.
pub fn invariant_perturbation_bound(
    q: &RateMatrix,
    qt: &RateMatrix,
    i0: usize,
    t_max: f64,
    dt: f64,
) -> Result<InvariantPerturbation, BoundsError> {
    if !(t_max > 0.0) || !(dt > 0.0) || dt >= t_max {
        return Err(BoundsError::BadTime(dt.min(t_max)));
    }
    if !is_irreducible(q) || !is_irreducible(qt) {
        return Err(BoundsError::NotIrreducible);
    }
    let pi = invariant_measure(q)?;
    let pit = invariant_measure(qt)?;
    let measured = tv_distance(&pi, &pit)?;
    let delta = l1_diff_norm(q, qt)?;

    let steps = (t_max / dt).ceil() as usize;
    let mut etas = Vec::with_capacity(steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = (k as f64 * dt).min(t_max);
        let p = transition_semigroup(q, t)?;
        let pt = transition_semigroup(qt, t)?;
        let d1: f64 = (0..q.n_states())
            .map(|j| (p[(i0, j)] - pi.weights()[j]).abs())
            .sum();
        let d2: f64 = (0..qt.n_states())
            .map(|j| (pt[(i0, j)] - pit.weights()[j]).abs())
            .sum();
        etas.push(d1.max(d2));
        times.push(t);
    }
    let eta_max = etas.iter().copied().fold(0.0, f64::max);
    let eta_end = *etas.last().unwrap();
    let noise_floor = 1e-12 * eta_max.max(1.0);
    if eta_end >= 0.5 * eta_max && eta_end > noise_floor {
        return Err(BoundsError::NoDecayEvidence {
            t_max,
            eta_end,
            eta_max,
        });
    }

    // trapezoid on [0, t_max]
    let mut integral = 0.0;
    for k in 1..etas.len() {
        integral += 0.5 * (etas[k] + etas[k - 1]) * (times[k] - times[k - 1]);
    }

    // exponential tail: fit ln η on the trailing segment where η is within a
    // decade of its final value, then add η(t_max)/λ. Once η sits at the
    // numerical noise floor the tail contributes nothing measurable and the
    // fit would regress on rounding jitter, so it is skipped.
    let mut tail_rate = f64::INFINITY;
    if eta_end > noise_floor {
        let cutoff = eta_end * 10.0;
        let start = etas
            .iter()
            .rposition(|&e| e > cutoff)
            .map(|i| i + 1)
            .unwrap_or(0)
            .min(etas.len().saturating_sub(5));
        let xs = &times[start..];
        let ys: Vec<f64> = etas[start..].iter().map(|&e| e.max(1e-300).ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        tail_rate = -slope;
        if tail_rate <= 0.0 {
            return Err(BoundsError::NoDecayEvidence {
                t_max,
                eta_end,
                eta_max,
            });
        }
        integral += eta_end / tail_rate;
    }

    let bound = 2.0 * 2.0f64.sqrt() * integral.max(0.0).sqrt() * delta.sqrt();
    Ok(InvariantPerturbation {
        bound,
        measured,
        eta_integral: integral,
        tail_rate,
        delta,
    })
}

/// Maximal real part over eigenvalues; dense for moderate sizes, shifted
/// power iteration beyond 500 states (tolerance ~1e-9 on the dominant
/// eigenvalue of the shifted matrix).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n <= 500 {
        let eig = m.clone().complex_eigenvalues();
        eig.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
    } else {
        // shift so the max-real-part eigenvalue dominates in modulus
        let scale: f64 = (0..n)
            .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let sigma = 10.0 * scale.max(1.0);
        let shifted = m + DMatrix::identity(n, n) * sigma;
        let mut v = DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let w = &shifted * &v;
            let norm = w.norm();
            if norm == 0.0 {
                return -sigma;
            }
            let next = w / norm;
            let new_lambda = (next.transpose() * &shifted * &next)[(0, 0)];
            let done = (new_lambda - lambda).abs() < 1e-9 * sigma;
            lambda = new_lambda;
            v = next;
            if done {
                break;
            }
        }
        lambda - sigma
    }
}

/// Outcome of the stability-exponent search.
#[derive(Debug, Clone)]
pub enum StabilityOutcome {
    /// Largest `p' ∈ (0, p_max]` with a negative abscissa, found by
    /// bisection to 1e-6, together with the abscissa at `p'`.
    Exponent { p_prime: f64, abscissa: f64 },
    /// `Σ μ̄_i β_i ≥ 0`: the average drift condition fails.
    ConditionViolated { mu_beta: f64 },
}

#[derive(Debug, Clone)]
pub struct StabilityExponent {
    pub mu_beta: f64,
    pub mu: ProbabilityVector,
    pub outcome: StabilityOutcome,
}

/// Checks `Σ μ̄_i β_i < 0` under the invariant measure of `q_bar`, then
/// finds the largest `p' ∈ (0, p_max]` with
/// `abscissa(Q̄ + p'·diag(β)) < 0`.
pub fn stability_exponent(
    q_bar: &RateMatrix,
    beta: &[f64],
    p_max: f64,
) -> Result<StabilityExponent, BoundsError> {
    if !(p_max > 0.0) || p_max > 1.0 {
        return Err(BoundsError::BadPMax(p_max));
    }
    let n = q_bar.n_states();
    if beta.len() != n {
        return Err(RateMatError::DimensionMismatch(beta.len(), n).into());
    }
    if !is_irreducible(q_bar) {
        return Err(BoundsError::NotIrreducible);
    }
    let mu = invariant_measure(q_bar)?;
    let mu_beta: f64 = mu.weights().iter().zip(beta).map(|(m, b)| m * b).sum();
    if mu_beta >= 0.0 {
        return Ok(StabilityExponent {
            mu_beta,
            mu,
            outcome: StabilityOutcome::ConditionViolated { mu_beta },
        });
    }
    let dense = q_bar.to_dense();
    let abscissa_at = |p: f64| -> f64 {
        let mut m = dense.clone();
        for i in 0..n {
            m[(i, i)] += p * beta[i];
        }
        spectral_abscissa(&m)
    };
    if abscissa_at(p_max) < 0.0 {
        let a = abscissa_at(p_max);
        return Ok(StabilityExponent {
            mu_beta,
            mu,
            outcome: StabilityOutcome::Exponent {
                p_prime: p_max,
                abscissa: a,
            },
        });
    }
    // abscissa'(0) = Σ μ̄ β < 0, so small p' work; find one, then bisect
    let mut lo = p_max / 2.0;
    while abscissa_at(lo) >= 0.0 && lo > 1e-12 {
        lo /= 2.0;
    }
    if lo <= 1e-12 {
        return Ok(StabilityExponent {
            mu_beta,
            mu,
            outcome: StabilityOutcome::ConditionViolated { mu_beta },
        });
    }
    let mut hi = p_max;
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if abscissa_at(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = abscissa_at(lo);
    Ok(StabilityExponent {
        mu_beta,
        mu,
        outcome: StabilityOutcome::Exponent {
            p_prime: lo,
            abscissa: a,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state_pair() -> (RateMatrix, RateMatrix) {
        (
            RateMatrix::from_dense_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            RateMatrix::from_dense_rows(&[vec![-2.0, 2.0], vec![2.0, -2.0]]).unwrap(),
        )
    }

    fn example_upper() -> RateMatrix {
        RateMatrix::from_dense_rows(&[
            vec![-5.0, 2.0, 3.0],
            vec![1.0, -4.0, 3.0],
            vec![1.0, 1.0, -2.0],
        ])
        .unwrap()
    }

    #[test]
    fn theta_bounds_zero_for_equal_generators() {
        let (q, _) = two_state_pair();
        let b = theta_bounds(&q, &q, 1, 1.0, 1.0).unwrap();
        assert_eq!(b.lower_h3, 0.0);
        assert_eq!(b.upper_h2, 0.0);
        assert_eq!(b.upper_h25, 0.0);
        assert_eq!(b.legacy_d8, 0.0);
    }

    #[test]
    fn theta_bounds_known_arithmetic() {
        let (q, qt) = two_state_pair();
        let b = theta_bounds(&q, &qt, 1, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(b.delta, 2.0);
        assert_abs_diff_eq!(b.inf_row_diff, 1.0);
        // δ = 2, t = 1: upper_h2 = 1 - (1 - e^{-2})/2
        assert_abs_diff_eq!(b.upper_h2, 0.5676676416183064, epsilon = 1e-15);
        assert_abs_diff_eq!(b.upper_h25, 1.0);
        // r = 1, M = 8, δ = 2: (1/10)(1 - (1-e^{-10})/10)
        let expect = 0.1 * (1.0 - (1.0 - (-10.0f64).exp()) / 10.0);
        assert_abs_diff_eq!(b.lower_h3, expect, epsilon = 1e-15);
        assert!(b.sane);
        assert_abs_diff_eq!(b.legacy_d8, 8.0);
    }

    #[test]
    fn upper_h2_below_upper_h25_on_grid() {
        for &delta in &[0.01, 0.1, 1.0, 5.0, 50.0] {
            for &t in &[0.01, 0.1, 1.0, 10.0, 1000.0] {
                let x = delta * t;
                assert!(
                    one_minus_relaxation(x) <= (x / 2.0).min(1.0) + 1e-14,
                    "x = {x}"
                );
            }
        }
    }

    #[test]
    fn theta_bounds_long_time_limits() {
        let (q, qt) = two_state_pair();
        let b = theta_bounds(&q, &qt, 1, 2.0, 1e3).unwrap();
        assert!((b.upper_h2 - 1.0).abs() < 1e-3);
        let limit = b.inf_row_diff / (b.m_const + b.delta);
        assert!((b.lower_h3 - limit).abs() < 1e-3);
    }

    #[test]
    fn mitrophanov_two_state_analytic() {
        let (q, qt) = two_state_pair();
        let m = mitrophanov_bound(&q, &qt).unwrap();
        assert_abs_diff_eq!(m.tau1.unwrap(), 0.5, epsilon = 1e-8);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(m.coefficient, e / (2.0 * (e - 1.0)), epsilon = 1e-7);
        assert_abs_diff_eq!(m.bound, m.coefficient * 2.0, epsilon = 1e-7);
        // equal generators: bound collapses to zero
        let z = mitrophanov_bound(&q, &q).unwrap();
        assert_eq!(z.bound, 0.0);
    }

    #[test]
    fn mitrophanov_reducible_is_infinite() {
        let q = RateMatrix::zero(2, 1);
        let (p, _) = two_state_pair();
        let m = mitrophanov_bound(&q, &p).unwrap();
        assert!(m.tau1.is_none());
        assert!(m.bound.is_infinite());
    }

    #[test]
    fn invariant_perturbation_two_state_symmetric() {
        // both invariant measures are uniform: measured 0 < bound
        let (q, qt) = two_state_pair();
        let r = invariant_perturbation_bound(&q, &qt, 0, 40.0, 0.05).unwrap();
        assert_abs_diff_eq!(r.measured, 0.0, epsilon = 1e-11);
        assert!(r.bound > 0.0);
        assert!(r.tail_rate > 0.0);
    }

    #[test]
    fn invariant_perturbation_dominates_on_perturbed_instances() {
        let q = example_upper();
        for &eps in &[0.01, 0.1] {
            let qt = RateMatrix::from_offdiag_fn(3, 2, |i, j| {
                q.rate(i, j) + eps * ((i * 3 + j) % 3) as f64 * 0.5
            })
            .unwrap();
            let r = invariant_perturbation_bound(&q, &qt, 0, 40.0, 0.05).unwrap();
            assert!(
                r.measured <= r.bound,
                "eps {eps}: measured {} > bound {}",
                r.measured,
                r.bound
            );
        }
    }

    #[test]
    fn stability_uniform_negative_beta() {
        let q = example_upper();
        let s = stability_exponent(&q, &[-1.0, -1.0, -1.0], 1.0).unwrap();
        match s.outcome {
            StabilityOutcome::Exponent { p_prime, abscissa } => {
                assert_abs_diff_eq!(p_prime, 1.0);
                // diagonal shift of a zero-abscissa generator
                assert_abs_diff_eq!(abscissa, -1.0, epsilon = 1e-9);
            }
            _ => panic!("expected exponent"),
        }
    }

    #[test]
    fn stability_condition_violated() {
        let q = example_upper();
        let s = stability_exponent(&q, &[1.0, 1.0, 1.0], 1.0).unwrap();
        assert!(matches!(
            s.outcome,
            StabilityOutcome::ConditionViolated { .. }
        ));
        assert_abs_diff_eq!(s.mu_beta, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stability_example_betas() {
        // μ̄·β = 1/6 + 7/30 - 3/5 = -0.2
        let q = example_upper();
        let s = stability_exponent(&q, &[1.0, 1.0, -1.0], 1.0).unwrap();
        assert_abs_diff_eq!(s.mu_beta, -0.2, epsilon = 1e-12);
        match s.outcome {
            StabilityOutcome::Exponent { p_prime, abscissa } => {
                assert!(p_prime > 0.0);
                assert!(abscissa < 0.0, "abscissa {abscissa} at p' {p_prime}");
            }
            _ => panic!("expected exponent"),
        }
    }

    #[test]
    fn abscissa_of_generator_is_zero()  {
        let q = example_upper();
        assert_abs_diff_eq!(spectral_abscissa(&q.to_dense()), 0.0, epsilon = 1e-10);
    }
}
