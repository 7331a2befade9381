//! Generator (Q-matrix) data types and the linear-algebra operations built
//! on them: validation, norms, envelope matrices, invariant measures,
//! semigroups and product-space coupling generators.
//!
//! A [`RateMatrix`] stores only the off-diagonal rates, banded with bandwidth
//! `c`; the diagonal is implied by conservativity (`q_ii = -Σ_{j≠i} q_ij`).
//! States are 0-based internally; user-facing diagnostics are 1-based.

mod coupling;
mod envelope;
mod invariant;
mod semigroup;

pub use coupling::{basic_coupling_generator, coupling_generator, is_disagreement_state};
pub use envelope::{
    bounded_quadratic_family, envelope_matrices, envelope_matrices_window, reorder_by_beta,
    EnvelopePair, EnvelopeProvenance, ReorderedSpec, SearchBox, StateDependentRateSpec, StateSpace,
};
pub use invariant::{invariant_measure, is_irreducible};
pub use semigroup::{
    ergodicity_profile, transition_semigroup, ErgodicityProfile, UniformizedRow,
};

use thiserror::Error;

/// Largest state count for which dense linear algebra is attempted.
pub const MAX_DENSE_STATES: usize = 10_000;

#[derive(Debug, Error)]
pub enum RateMatError {
    #[error("state count mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix has {0} states, dense operations refuse beyond {MAX_DENSE_STATES}")]
    TooLarge(usize),
    #[error("negative or non-finite rate {value} at ({row}, {col}) (1-based)")]
    InvalidRate { row: usize, col: usize, value: f64 },
    #[error("matrix is not square: row {0} has {1} entries, expected {2}")]
    NotSquare(usize, usize, usize),
    #[error("generator is reducible")]
    Reducible,
    #[error("countable state space: operation requires a finite generator")]
    Countable,
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("empty time grid")]
    EmptyGrid,
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
    #[error("envelope computation needs an envelope oracle or a search box")]
    MissingEnvelopeData,
    #[error("search grid too large: {0} points (cap {1})")]
    GridTooLarge(usize, usize),
    #[error("invariant-measure solve failed: {0}")]
    SolveFailed(String),
    #[error("bad matrix text: {0}")]
    Parse(String),
}

/// Conservative generator with banded off-diagonal storage.
///
/// `rate(i, j)` is the jump rate `i -> j` for `i != j`; entries with
/// `|i - j| > bandwidth` are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    n: usize,
    c: usize,
    // row-major, n rows of 2c+1 offset slots (-c..=c); the diagonal slot is unused
    rows: Vec<f64>,
}

impl RateMatrix {
    pub fn zero(n: usize, bandwidth: usize) -> Self {
        let c = bandwidth.min(n.saturating_sub(1));
        RateMatrix {
            n,
            c,
            rows: vec![0.0; n * (2 * c + 1)],
        }
    }

    /// Builds from an off-diagonal rate function evaluated inside the band.
    pub fn from_offdiag_fn(
        n: usize,
        bandwidth: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self, RateMatError> {
        let mut m = RateMatrix::zero(n, bandwidth);
        for i in 0..n {
            let (lo, hi) = m.band_range(i);
            for j in lo..=hi {
                if j == i {
                    continue;
                }
                let v = f(i, j);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(RateMatError::InvalidRate {
                        row: i + 1,
                        col: j + 1,
                        value: v,
                    });
                }
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    /// Builds from a full dense table (diagonal entries are recomputed).
    /// Fails on any violation reported by [`validate_dense`].
    pub fn from_dense_rows(rows: &[Vec<f64>]) -> Result<Self, RateMatError> {
        let violations = validate_dense(rows);
        if let Some(v) = violations.first() {
            return Err(RateMatError::Parse(v.clone()));
        }
        let n = rows.len();
        let mut band = 0usize;
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j && v > 0.0 {
                    band = band.max(i.abs_diff(j));
                }
            }
        }
        RateMatrix::from_offdiag_fn(n, band, |i, j| rows[i][j])
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn bandwidth(&self) -> usize {
        self.c
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        i * (2 * self.c + 1) + (j + self.c - i)
    }

    fn band_range(&self, i: usize) -> (usize, usize) {
        (i.saturating_sub(self.c), (i + self.c).min(self.n - 1))
    }

    /// Off-diagonal rate `i -> j`; zero outside the band, the diagonal, and
    /// the state space.
    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if i == j || i >= self.n || j >= self.n || i.abs_diff(j) > self.c {
            0.0
        } else {
            self.rows[self.slot(i, j)]
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i != j && i.abs_diff(j) <= self.c, "entry outside band");
        let s = self.slot(i, j);
        self.rows[s] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i != j && i.abs_diff(j) <= self.c, "entry outside band");
        let s = self.slot(i, j);
        self.rows[s] += v;
    }

    /// Total jump intensity `q_i = Σ_{j≠i} q_ij`, accumulated in ascending-j
    /// order (the layout builders rely on that order bit-for-bit).
    pub fn row_intensity(&self, i: usize) -> f64 {
        let (lo, hi) = self.band_range(i);
        let mut s = 0.0;
        for j in lo..=hi {
            if j != i {
                s += self.rate(i, j);
            }
        }
        s
    }

    /// Diagonal entry `q_ii`.
    pub fn diag(&self, i: usize) -> f64 {
        -self.row_intensity(i)
    }

    /// `K₀ = sup_i |q_ii|`.
    pub fn k0(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row_intensity(i))
            .fold(0.0, f64::max)
    }

    /// Largest `|i-j|` with a strictly positive rate.
    pub fn max_positive_offset(&self) -> usize {
        let mut m = 0usize;
        for i in 0..self.n {
            let (lo, hi) = self.band_range(i);
            for j in lo..=hi {
                if j != i && self.rate(i, j) > 0.0 {
                    m = m.max(i.abs_diff(j));
                }
            }
        }
        m
    }

    /// Downward and upward half-row sums `(Σ_{j<i} q_ij, Σ_{j>i} q_ij)`.
    pub fn half_row_sums(&self, i: usize) -> (f64, f64) {
        let (lo, hi) = self.band_range(i);
        let mut down = 0.0;
        let mut up = 0.0;
        for j in lo..=hi {
            match j.cmp(&i) {
                std::cmp::Ordering::Less => down += self.rate(i, j),
                std::cmp::Ordering::Greater => up += self.rate(i, j),
                std::cmp::Ordering::Equal => {}
            }
        }
        (down, up)
    }

    /// Nonzero off-diagonal entries of row `i` in ascending target order.
    pub fn iter_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = self.band_range(i);
        (lo..=hi).filter_map(move |j| {
            let r = self.rate(i, j);
            (j != i && r > 0.0).then_some((j, r))
        })
    }

    /// Dense representation including the implied diagonal.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n;
        nalgebra::DMatrix::from_fn(n, n, |i, j| if i == j { self.diag(i) } else { self.rate(i, j) })
    }

    /// Structural invariant check (report style, empty = valid).
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.n {
            let (lo, hi) = self.band_range(i);
            for j in lo..=hi {
                if j == i {
                    continue;
                }
                let v = self.rate(i, j);
                if !(v >= 0.0) || !v.is_finite() {
                    out.push(format!("invalid rate {} at ({}, {})", v, i + 1, j + 1));
                }
            }
        }
        if !self.k0().is_finite() {
            out.push("K0 is not finite".to_string());
        }
        out
    }

    /// Plain-text serialization: header `N c`, then one line per state with
    /// the `2c+1` band slots (diagonal slot written as 0, recomputed on load).
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.c);
        for i in 0..self.n {
            let w = 2 * self.c + 1;
            let line: Vec<String> = (0..w)
                .map(|k| {
                    let j = (i + k).wrapping_sub(self.c);
                    if j == i || j >= self.n || i.abs_diff(j) > self.c {
                        "0".to_string()
                    } else {
                        format!("{}", self.rate(i, j))
                    }
                })
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RateMatError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| RateMatError::Parse("missing header".into()))?;
        let mut it = header.split_whitespace();
        let n: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| RateMatError::Parse("bad header: expected `N c`".into()))?;
        let c: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| RateMatError::Parse("bad header: expected `N c`".into()))?;
        let mut m = RateMatrix::zero(n, c);
        let c = m.c;
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| RateMatError::Parse(format!("missing row {}", i + 1)))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| RateMatError::Parse(format!("bad number `{t}` in row {}", i + 1)))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != 2 * c + 1 {
                return Err(RateMatError::Parse(format!(
                    "row {} has {} entries, expected {}",
                    i + 1,
                    vals.len(),
                    2 * c + 1
                )));
            }
            for (k, &v) in vals.iter().enumerate() {
                let j = (i + k).wrapping_sub(c);
                if j == i || j >= n {
                    continue;
                }
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(RateMatError::InvalidRate {
                        row: i + 1,
                        col: j + 1,
                        value: v,
                    });
                }
                m.set(i, j, v);
            }
        }
        Ok(m)
    }
}

/// Checks a user-supplied dense table: squareness, off-diagonal sign, and
/// conservativity of each row. Returns human-readable violations (1-based).
pub fn validate_dense(rows: &[Vec<f64>]) -> Vec<String> {
    let n = rows.len();
    let mut out = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            out.push(format!(
                "row {} has {} entries, expected {}",
                i + 1,
                row.len(),
                n
            ));
            continue;
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                out.push(format!("non-finite entry at ({}, {})", i + 1, j + 1));
            } else if i != j && v < 0.0 {
                out.push(format!("negative rate {} at ({}, {})", v, i + 1, j + 1));
            }
            sum += v;
        }
        if sum.abs() > 1e-9 * (1.0 + row.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            out.push(format!("non-conservative row {}", i + 1));
        }
    }
    out
}

/// `‖A - B‖_{ℓ1} = sup_i Σ_j |a_ij - b_ij|`, diagonals included.
pub fn l1_diff_norm(a: &RateMatrix, b: &RateMatrix) -> Result<f64, RateMatError> {
    if a.n != b.n {
        return Err(RateMatError::DimensionMismatch(a.n, b.n));
    }
    let c = a.c.max(b.c);
    let mut sup = 0.0f64;
    for i in 0..a.n {
        let lo = i.saturating_sub(c);
        let hi = (i + c).min(a.n - 1);
        let mut s = 0.0;
        for j in lo..=hi {
            if j == i {
                s += (a.diag(i) - b.diag(i)).abs();
            } else {
                s += (a.rate(i, j) - b.rate(i, j)).abs();
            }
        }
        sup = sup.max(s);
    }
    Ok(sup)
}

/// `inf_i Σ_{j≠i} |q_ij - q̃_ij|` (off-diagonal only), the `r` of the lower
/// disagreement bound.
pub fn inf_offdiag_row_diff(a: &RateMatrix, b: &RateMatrix) -> Result<f64, RateMatError> {
    if a.n != b.n {
        return Err(RateMatError::DimensionMismatch(a.n, b.n));
    }
    let c = a.c.max(b.c);
    let mut inf = f64::INFINITY;
    for i in 0..a.n {
        let lo = i.saturating_sub(c);
        let hi = (i + c).min(a.n - 1);
        let mut s = 0.0;
        for j in lo..=hi {
            if j != i {
                s += (a.rate(i, j) - b.rate(i, j)).abs();
            }
        }
        inf = inf.min(s);
    }
    Ok(inf)
}

/// Probability vector on the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, RateMatError> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(RateMatError::InvalidProbability(
                "negative or non-finite weight".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(RateMatError::InvalidProbability(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(ProbabilityVector(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Total variation distance `Σ_i |μ_i - ν_i|` (the `sup_{|h|≤1}` form attains
/// this at `h = sign(μ-ν)`); ranges over `[0, 2]`.
pub fn tv_distance(mu: &ProbabilityVector, nu: &ProbabilityVector) -> Result<f64, RateMatError> {
    if mu.len() != nu.len() {
        return Err(RateMatError::DimensionMismatch(mu.len(), nu.len()));
    }
    Ok(mu
        .weights()
        .iter()
        .zip(nu.weights())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// TV distance between two raw nonnegative rows (used on semigroup rows).
pub fn tv_distance_rows(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
