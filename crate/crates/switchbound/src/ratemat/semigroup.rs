//! Transition semigroups: dense matrix exponential by scaling-and-squaring,
//! a uniformization view for repeated single-row evaluation, and the
//! ergodicity coefficient profile β(t) with its e⁻¹ crossing time τ₁.

use nalgebra::DMatrix;

use super::{RateMatError, RateMatrix, MAX_DENSE_STATES};

/// `exp(tQ)` as a dense row-stochastic matrix.
///
/// Scaling-and-squaring with a truncated series core: the scaled matrix norm
/// is brought below 0.5, the series is summed to machine precision, then
/// squared back. Entries in `[-1e-14, 0)` are clamped to zero.
pub fn transition_semigroup(q: &RateMatrix, t: f64) -> Result<DMatrix<f64>, RateMatError> {
    if t < 0.0 {
        return Err(RateMatError::NegativeTime(t));
    }
    let n = q.n_states();
    if n > MAX_DENSE_STATES {
        return Err(RateMatError::TooLarge(n));
    }
    let a = q.to_dense() * t;
    Ok(expm_dense(&a))
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Matrix exponential of a general square matrix (series + squaring).
pub fn expm_dense(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = inf_norm(a);
    let squarings = if norm <= 0.5 {
        0
    } else {
        (norm / 0.5).log2().ceil() as u32
    };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=40 {
        term = (&term * &scaled) / k as f64;
        sum += &term;
        if inf_norm(&term) <= 1e-17 * inf_norm(&sum) {
            break;
        }
    }
    let mut result = sum;
    for _ in 0..squarings {
        result = &result * &result;
    }
    for v in result.iter_mut() {
        if *v < 0.0 && *v >= -1e-14 {
            *v = 0.0;
        }
    }
    result
}

/// Normalized Poisson weights around the mode, truncated where the relative
/// weight drops below `tol`. Returns `(k_min, weights)` with
/// `weights[m] ≈ P(Pois(mean) = k_min + m)`; stable for any mean (no
/// `exp(-mean)` underflow, the recurrence is normalized at the end).
pub fn poisson_weights(mean: f64, tol: f64) -> (usize, Vec<f64>) {
    if mean <= 0.0 {
        return (0, vec![1.0]);
    }
    let mode = mean.floor() as usize;
    let mut down = Vec::new();
    let mut w = 1.0f64;
    let mut k = mode;
    while k > 0 {
        w *= k as f64 / mean;
        if w < tol {
            break;
        }
        down.push(w);
        k -= 1;
    }
    let k_min = mode - down.len();
    let mut weights: Vec<f64> = down.into_iter().rev().collect();
    weights.push(1.0);
    let mut w = 1.0f64;
    let mut k = mode;
    loop {
        w *= mean / (k + 1) as f64;
        if w < tol {
            break;
        }
        weights.push(w);
        k += 1;
    }
    let total: f64 = weights.iter().sum();
    for v in &mut weights {
        *v /= total;
    }
    (k_min, weights)
}

/// One source row of `exp(tQ)` evaluated by uniformization with cached
/// powers: `v_k = e_src P^k`, `P = I + Q/λ`. Built once, then each time point
/// costs `O(k_max)` for a fixed linear functional of the row.
pub struct UniformizedRow {
    lambda: f64,
    n: usize,
    q: RateMatrix,
    vs: Vec<Vec<f64>>,
}

impl UniformizedRow {
    pub fn new(q: &RateMatrix, src: usize) -> Result<Self, RateMatError> {
        let n = q.n_states();
        if src >= n {
            return Err(RateMatError::DimensionMismatch(src, n));
        }
        // λ strictly above the max intensity keeps P entrywise nonnegative
        let lambda = (q.k0() * (1.0 + 1e-12)).max(1e-300);
        let mut v0 = vec![0.0; n];
        v0[src] = 1.0;
        Ok(UniformizedRow {
            lambda,
            n,
            q: q.clone(),
            vs: vec![v0],
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn ensure_k(&mut self, k_max: usize) {
        while self.vs.len() <= k_max {
            let prev = self.vs.last().unwrap();
            // v P = v + (v Q)/λ, banded product
            let mut next = prev.clone();
            for (i, &vi) in prev.iter().enumerate() {
                if vi == 0.0 {
                    continue;
                }
                for (j, r) in self.q.iter_row(i) {
                    next[j] += vi * r / self.lambda;
                }
                next[i] += vi * self.q.diag(i) / self.lambda;
            }
            for v in &mut next {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            self.vs.push(next);
        }
    }

    /// Row of `exp(tQ)` from the source state.
    pub fn row_at(&mut self, t: f64) -> Vec<f64> {
        let (k_min, weights) = poisson_weights(self.lambda * t, 1e-18);
        self.ensure_k(k_min + weights.len() - 1);
        let mut row = vec![0.0; self.n];
        for (m, w) in weights.iter().enumerate() {
            let v = &self.vs[k_min + m];
            for (r, vi) in row.iter_mut().zip(v) {
                *r += w * vi;
            }
        }
        row
    }

    /// `Σ_k w_k(λt) · g(v_k)` for a fixed functional `g` given as per-k
    /// precomputed values; used by the disagreement oracle.
    pub fn functional_at(&mut self, t: f64, per_k: &mut Vec<f64>, g: impl Fn(&[f64]) -> f64) -> f64 {
        let (k_min, weights) = poisson_weights(self.lambda * t, 1e-18);
        self.ensure_k(k_min + weights.len() - 1);
        while per_k.len() < self.vs.len() {
            per_k.push(g(&self.vs[per_k.len()]));
        }
        weights
            .iter()
            .enumerate()
            .map(|(m, w)| w * per_k[k_min + m])
            .sum()
    }
}

/// β(t) curve on a time grid and the first time β crosses e⁻¹.
#[derive(Debug, Clone)]
pub struct ErgodicityProfile {
    pub grid: Vec<f64>,
    pub betas: Vec<f64>,
    /// `inf { t > 0 : β(t) ≤ e⁻¹ }`, bisected to 1e-8; `None` if β stays
    /// above e⁻¹ on the whole grid.
    pub tau1: Option<f64>,
    /// Smallest β seen on the grid (how close the crossing got).
    pub min_beta: f64,
}

/// Ergodicity coefficient `β(t) = ½ max_{i,j} ‖(e_i-e_j) exp(tQ)‖_{ℓ1}`.
pub fn beta_coefficient(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..n {
                s += (p[(i, k)] - p[(j, k)]).abs();
            }
            best = best.max(s);
        }
    }
    0.5 * best
}

const E_INV: f64 = 0.36787944117144233; // e^{-1}

pub fn ergodicity_profile(
    q: &RateMatrix,
    t_grid: &[f64],
) -> Result<ErgodicityProfile, RateMatError> {
    if t_grid.is_empty() {
        return Err(RateMatError::EmptyGrid);
    }
    let betas: Vec<f64> = t_grid
        .iter()
        .map(|&t| transition_semigroup(q, t).map(|p| beta_coefficient(&p)))
        .collect::<Result<_, _>>()?;
    let min_beta = betas.iter().copied().fold(f64::INFINITY, f64::min);

    let beta_at = |t: f64| -> Result<f64, RateMatError> {
        Ok(beta_coefficient(&transition_semigroup(q, t)?))
    };
    let mut tau1 = None;
    for (k, &b) in betas.iter().enumerate() {
        if b <= E_INV {
            let (mut lo, mut hi) = if k == 0 {
                (0.0, t_grid[0])
            } else {
                (t_grid[k - 1], t_grid[k])
            };
            while hi - lo > 1e-8 {
                let mid = 0.5 * (lo + hi);
                if beta_at(mid)? <= E_INV {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            tau1 = Some(0.5 * (lo + hi));
            break;
        }
    }
    Ok(ErgodicityProfile {
        grid: t_grid.to_vec(),
        betas,
        tau1,
        min_beta,
    })
}
