//! State-dependent rate specifications and the comparison envelope matrices.
//!
//! For a state-dependent generator `q_ij(x)` the envelope pair `(q*, q̄)`
//! consists of two constant generators whose chains sandwich the
//! state-dependent switching process pathwise when all three are driven by
//! one Poisson mark stream through comparison-signed layouts.
//!
//! Upper envelope (row `i`, 0-based):
//!   `q̄_ij = inf_x min_{j<ℓ≤i} q_ℓj(x)` for `j<i`,
//!   `q̄_ij = sup_x max_{ℓ≤i}   q_ℓj(x)` for `j>i`.
//!
//! Lower envelope (the order-reversed construction):
//!   `q*_ij = sup_x max_{ℓ≥i}   q_ℓj(x)` for `j<i`,
//!   `q*_ij = inf_x min_{i≤ℓ<j} q_ℓj(x)` for `j>i`.
//!
//! The ℓ-ranges make the prefix-sum inclusions between layouts hold termwise
//! for every pair of ordered source states, which is exactly what the
//! pathwise sandwich needs; see `layout` for the geometric side.

use std::sync::Arc;

use super::{RateMatError, RateMatrix};

/// Finite `{1..N}` or countably infinite state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSpace {
    Finite(usize),
    Countable,
}

impl StateSpace {
    pub fn finite(&self) -> Option<usize> {
        match self {
            StateSpace::Finite(n) => Some(*n),
            StateSpace::Countable => None,
        }
    }
}

/// Rectangular search box in `R^d` with a uniform grid resolution, the
/// fallback domain for numeric sup/inf when no envelope oracle is supplied.
#[derive(Debug, Clone)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points_per_dim: usize,
}

const GRID_POINT_CAP: usize = 1_000_000;

impl SearchBox {
    pub fn new_1d(lo: f64, hi: f64, points: usize) -> Self {
        SearchBox {
            lo: vec![lo],
            hi: vec![hi],
            points_per_dim: points.max(2),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Deterministic full grid, row-major over dimensions.
    pub fn grid(&self) -> Result<Vec<Vec<f64>>, RateMatError> {
        let d = self.dim();
        let p = self.points_per_dim.max(2);
        let total = p.checked_pow(d as u32).unwrap_or(usize::MAX);
        if total > GRID_POINT_CAP {
            return Err(RateMatError::GridTooLarge(total, GRID_POINT_CAP));
        }
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        loop {
            let x: Vec<f64> = (0..d)
                .map(|k| {
                    let t = idx[k] as f64 / (p - 1) as f64;
                    self.lo[k] + t * (self.hi[k] - self.lo[k])
                })
                .collect();
            points.push(x);
            let mut k = 0;
            loop {
                if k == d {
                    return Ok(points);
                }
                idx[k] += 1;
                if idx[k] < p {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

type RateOracle = Arc<dyn Fn(usize, usize, &[f64]) -> f64 + Send + Sync>;
type EnvelopeOracle = Arc<dyn Fn(usize, usize) -> (f64, f64) + Send + Sync>;

/// State-dependent conservative generator given by a rate oracle plus the
/// metadata the constructions need: a uniform intensity bound `K₀` and
/// per-state/global bandwidths. An optional per-pair envelope oracle supplies
/// exact `(inf_x, sup_x)` values; otherwise sup/inf fall back to a grid
/// search over `search_box`.
#[derive(Clone)]
pub struct StateDependentRateSpec {
    pub space: StateSpace,
    rate: RateOracle,
    pub k0: f64,
    pub per_state_bandwidth: Option<Vec<usize>>,
    pub global_bandwidth: usize,
    envelope: Option<EnvelopeOracle>,
    pub search_box: Option<SearchBox>,
}

impl std::fmt::Debug for StateDependentRateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateDependentRateSpec")
            .field("space", &self.space)
            .field("k0", &self.k0)
            .field("global_bandwidth", &self.global_bandwidth)
            .field("has_envelope_oracle", &self.envelope.is_some())
            .finish()
    }
}

impl StateDependentRateSpec {
    pub fn new(
        space: StateSpace,
        k0: f64,
        global_bandwidth: usize,
        rate: impl Fn(usize, usize, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        StateDependentRateSpec {
            space,
            rate: Arc::new(rate),
            k0,
            per_state_bandwidth: None,
            global_bandwidth,
            envelope: None,
            search_box: None,
        }
    }

    pub fn with_envelope_oracle(
        mut self,
        env: impl Fn(usize, usize) -> (f64, f64) + Send + Sync + 'static,
    ) -> Self {
        self.envelope = Some(Arc::new(env));
        self
    }

    pub fn with_search_box(mut self, b: SearchBox) -> Self {
        self.search_box = Some(b);
        self
    }

    pub fn with_per_state_bandwidth(mut self, c: Vec<usize>) -> Self {
        self.per_state_bandwidth = Some(c);
        self
    }

    /// The constant-generator special case (oracle ignores `x`).
    pub fn from_matrix(q: &RateMatrix) -> Self {
        let q = q.clone();
        let n = q.n_states();
        let c = q.bandwidth();
        let k0 = q.k0();
        let q2 = q.clone();
        StateDependentRateSpec::new(StateSpace::Finite(n), k0, c, move |i, j, _x| q.rate(i, j))
            .with_envelope_oracle(move |i, j| {
                let r = q2.rate(i, j);
                (r, r)
            })
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        (self.rate)(i, j, x)
    }

    /// Upward bandwidth `c_i` used by the comparison layout of state `i`.
    pub fn c_i(&self, i: usize) -> usize {
        match &self.per_state_bandwidth {
            Some(v) if i < v.len() => v[i],
            _ => self.global_bandwidth,
        }
    }

    pub fn has_envelope_oracle(&self) -> bool {
        self.envelope.is_some()
    }

    /// `(inf_x q_ij(x), sup_x q_ij(x))` from the oracle or the grid fallback.
    pub fn pair_inf_sup(&self, i: usize, j: usize) -> Result<(f64, f64), RateMatError> {
        if i == j {
            return Ok((0.0, 0.0));
        }
        if i.abs_diff(j) > self.c_i(i).max(self.global_bandwidth) {
            return Ok((0.0, 0.0));
        }
        if let Some(env) = &self.envelope {
            return Ok(env(i, j));
        }
        let bx = self
            .search_box
            .as_ref()
            .ok_or(RateMatError::MissingEnvelopeData)?;
        let mut inf = f64::INFINITY;
        let mut sup = f64::NEG_INFINITY;
        for x in bx.grid()? {
            let v = self.rate(i, j, &x);
            inf = inf.min(v);
            sup = sup.max(v);
        }
        Ok((inf, sup))
    }

    /// Per-state sup half-row sums `(Σ_{j<i} sup_x q_ij, Σ_{j>i} sup_x q_ij)`,
    /// an exact cover for every layout the spec can produce at any `x`.
    pub fn sup_half_row_sums(&self, i: usize, n_window: usize) -> Result<(f64, f64), RateMatError> {
        let c = self.c_i(i).max(self.global_bandwidth);
        let mut down = 0.0;
        let mut up = 0.0;
        for j in i.saturating_sub(c)..=(i + c).min(n_window - 1) {
            if j == i {
                continue;
            }
            let (_, sup) = self.pair_inf_sup(i, j)?;
            if j < i {
                down += sup;
            } else {
                up += sup;
            }
        }
        Ok((down, up))
    }

    /// Report-style validation on a deterministic sample grid: nonnegative
    /// rates, row intensities within the declared `K₀` (Q1), and zero rates
    /// beyond the declared bandwidths (Q2).
    pub fn validate(&self, window: usize) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.space.finite().unwrap_or(window).min(window);
        let grid = match &self.search_box {
            Some(b) => match b.grid() {
                Ok(g) => g,
                Err(e) => return vec![format!("search box: {e}")],
            },
            None => vec![vec![0.0]],
        };
        if self.envelope.is_none() && self.search_box.is_none() {
            out.push("no envelope oracle and no search box declared".to_string());
        }
        let cbar = self.global_bandwidth;
        for x in &grid {
            for i in 0..n {
                let c_i = self.c_i(i);
                // probe slightly beyond the declared bandwidth; finite spaces
                // stop at their last state
                let probe_hi = match self.space {
                    StateSpace::Finite(nn) => (i + cbar.max(c_i) + 2).min(nn - 1),
                    StateSpace::Countable => i + cbar.max(c_i) + 2,
                };
                let mut intensity = 0.0;
                for j in i.saturating_sub(cbar.max(c_i) + 2)..=probe_hi {
                    if j == i {
                        continue;
                    }
                    let v = self.rate(i, j, x);
                    if !(v >= 0.0) || !v.is_finite() {
                        out.push(format!(
                            "invalid rate {} at ({}, {}) for x={:?}",
                            v,
                            i + 1,
                            j + 1,
                            x
                        ));
                        return out;
                    }
                    if v > 0.0 && i.abs_diff(j) > c_i {
                        out.push(format!(
                            "positive rate at ({}, {}) beyond declared bandwidth {} (x={:?})",
                            i + 1,
                            j + 1,
                            c_i,
                            x
                        ));
                        return out;
                    }
                    intensity += v;
                }
                if intensity > self.k0 * (1.0 + 1e-12) {
                    out.push(format!(
                        "row {} intensity {} exceeds declared K0 = {} (x={:?})",
                        i + 1,
                        intensity,
                        self.k0,
                        x
                    ));
                    return out;
                }
            }
        }
        out
    }
}

/// Where envelope entries came from: a closed-form oracle or a grid search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeProvenance {
    ClosedForm,
    Grid { points_per_dim: usize },
}

/// The pair `(q*, q̄)` of bounding generators.
#[derive(Debug, Clone)]
pub struct EnvelopePair {
    pub lower: RateMatrix,
    pub upper: RateMatrix,
    pub provenance: EnvelopeProvenance,
}

/// Envelope matrices for a finite spec.
pub fn envelope_matrices(spec: &StateDependentRateSpec) -> Result<EnvelopePair, RateMatError> {
    let n = spec.space.finite().ok_or(RateMatError::Countable)?;
    envelope_matrices_window(spec, n)
}

/// Envelope matrices materialized on the window `{1..n_window}`; for finite
/// specs the window is the whole space, for countable ones the caller owns
/// the choice.
pub fn envelope_matrices_window(
    spec: &StateDependentRateSpec,
    n_window: usize,
) -> Result<EnvelopePair, RateMatError> {
    if n_window == 0 {
        return Err(RateMatError::DimensionMismatch(0, 1));
    }
    let cbar = spec.global_bandwidth.max(
        spec.per_state_bandwidth
            .as_ref()
            .map(|v| v.iter().copied().max().unwrap_or(0))
            .unwrap_or(0),
    );
    let provenance = if spec.has_envelope_oracle() {
        EnvelopeProvenance::ClosedForm
    } else {
        let b = spec
            .search_box
            .as_ref()
            .ok_or(RateMatError::MissingEnvelopeData)?;
        EnvelopeProvenance::Grid {
            points_per_dim: b.points_per_dim,
        }
    };

    let mut lower = RateMatrix::zero(n_window, cbar.min(n_window.saturating_sub(1)));
    let mut upper = RateMatrix::zero(n_window, cbar.min(n_window.saturating_sub(1)));
    for i in 0..n_window {
        for j in i.saturating_sub(cbar)..=(i + cbar).min(n_window - 1) {
            if j == i {
                continue;
            }
            let (lo_v, up_v) = if j < i {
                // q̄_ij = inf min_{j<ℓ≤i};  q*_ij = sup max_{ℓ≥i} (ℓ ≤ j+c̄)
                let mut ub = f64::INFINITY;
                for l in (j + 1)..=i {
                    let (inf, _) = spec.pair_inf_sup(l, j)?;
                    ub = ub.min(inf);
                }
                let mut lb = 0.0f64;
                for l in i..=(j + cbar).min(n_window - 1) {
                    let (_, sup) = spec.pair_inf_sup(l, j)?;
                    lb = lb.max(sup);
                }
                (lb, ub)
            } else {
                // q̄_ij = sup max_{ℓ≤i};  q*_ij = inf min_{i≤ℓ<j}
                let mut ub = 0.0f64;
                for l in 0..=i {
                    let (_, sup) = spec.pair_inf_sup(l, j)?;
                    ub = ub.max(sup);
                }
                let mut lb = f64::INFINITY;
                for l in i..j {
                    let (inf, _) = spec.pair_inf_sup(l, j)?;
                    lb = lb.min(inf);
                }
                (lb, ub)
            };
            if lo_v.is_finite() && lo_v > 0.0 {
                lower.set(i, j, lo_v);
            }
            if up_v.is_finite() && up_v > 0.0 {
                upper.set(i, j, up_v);
            }
        }
    }
    Ok(EnvelopePair {
        lower,
        upper,
        provenance,
    })
}

/// Spec relabeled so that `beta` is nondecreasing (stable sort).
pub struct ReorderedSpec {
    pub spec: StateDependentRateSpec,
    pub beta: Vec<f64>,
    /// `permutation[new] = old` (0-based).
    pub permutation: Vec<usize>,
}

/// Relabels a finite spec by a stable permutation making `beta` nondecreasing;
/// the rate oracle is conjugated by the permutation. Envelope matrices must be
/// computed *after* reordering — the state order enters the min/max ranges.
pub fn reorder_by_beta(
    spec: &StateDependentRateSpec,
    beta: &[f64],
) -> Result<ReorderedSpec, RateMatError> {
    let n = spec.space.finite().ok_or(RateMatError::Countable)?;
    if beta.len() != n {
        return Err(RateMatError::DimensionMismatch(beta.len(), n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&a, &b| beta[a].partial_cmp(&beta[b]).unwrap_or(std::cmp::Ordering::Equal));
    let beta_sorted: Vec<f64> = perm.iter().map(|&o| beta[o]).collect();

    // new bandwidths: reachability pattern conjugated by the permutation
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut per_state = vec![0usize; n];
    let cbar_old = spec.global_bandwidth.max(
        spec.per_state_bandwidth
            .as_ref()
            .map(|v| v.iter().copied().max().unwrap_or(0))
            .unwrap_or(0),
    );
    for new_i in 0..n {
        let old_i = perm[new_i];
        let mut c = 0usize;
        for old_j in old_i.saturating_sub(cbar_old)..=(old_i + cbar_old).min(n - 1) {
            if old_j != old_i {
                c = c.max(new_i.abs_diff(inv[old_j]));
            }
        }
        per_state[new_i] = c;
    }
    let cbar_new = per_state.iter().copied().max().unwrap_or(0);

    let inner = spec.rate.clone();
    let perm_rate = perm.clone();
    let mut new_spec = StateDependentRateSpec::new(
        StateSpace::Finite(n),
        spec.k0,
        cbar_new,
        move |i, j, x| {
            if i >= perm_rate.len() || j >= perm_rate.len() {
                0.0
            } else {
                inner(perm_rate[i], perm_rate[j], x)
            }
        },
    )
    .with_per_state_bandwidth(per_state);
    if let Some(env) = &spec.envelope {
        let env = env.clone();
        let perm_env = perm.clone();
        new_spec = new_spec.with_envelope_oracle(move |i, j| {
            if i >= perm_env.len() || j >= perm_env.len() {
                (0.0, 0.0)
            } else {
                env(perm_env[i], perm_env[j])
            }
        });
    }
    if let Some(b) = &spec.search_box {
        new_spec = new_spec.with_search_box(b.clone());
    }
    Ok(ReorderedSpec {
        spec: new_spec,
        beta: beta_sorted,
        permutation: perm,
    })
}

/// The built-in parametric rate family `q_ij(x) = base + scale·|i-j|·(x²∧1)`
/// on `d = 1`, with its exact closed-form envelope oracle.
pub fn bounded_quadratic_family(n: usize, base: f64, scale: f64) -> StateDependentRateSpec {
    let cbar = n.saturating_sub(1);
    StateDependentRateSpec::new(StateSpace::Finite(n), {
        // K0 = max_i Σ_{j≠i} (base + scale·|i-j|): attained at an edge state
        let mut k0: f64 = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += base + scale * i.abs_diff(j) as f64;
                }
            }
            k0 = k0.max(s);
        }
        k0
    }, cbar, move |i, j, x: &[f64]| {
        if i == j || i >= n || j >= n {
            0.0
        } else {
            let u = (x[0] * x[0]).min(1.0);
            base + scale * i.abs_diff(j) as f64 * u
        }
    })
    .with_envelope_oracle(move |i, j| {
        if i == j || i >= n || j >= n {
            (0.0, 0.0)
        } else {
            (base, base + scale * i.abs_diff(j) as f64)
        }
    })
    .with_search_box(SearchBox::new_1d(-2.0, 2.0, 41))
}
