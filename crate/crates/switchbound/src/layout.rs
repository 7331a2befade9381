//! Interval layouts on the real line: the map from a Poisson mark to a jump
//! target is `z ↦ j` iff `z ∈ Γ_ij`, so the geometry of the intervals — not
//! just their lengths — decides how processes sharing one mark stream move
//! relative to each other. Three layouts are built here:
//!
//! * **classical** — all rows packed consecutively on `[0, ∞)`;
//! * **comparison-signed** — per state, downward targets packed on `[0, ∞)`
//!   in ascending target order and upward targets on `(-∞, 0)` with the
//!   farthest state adjacent to zero; all states share the origin;
//! * **block** — each state's intervals live in its own block `U_n`, and the
//!   left endpoint of `Γ_nk` depends only on `(n, k, c₀, K₀)`, so two
//!   generators sharing `(c₀, K₀)` overlap interval-by-interval.
//!
//! All intervals are half-open `[a, b)` with exact floating comparisons, and
//! prefix sums accumulate in a fixed order (ascending targets downward,
//! descending targets upward), which makes the containment relations between
//! layouts of termwise-ordered rate rows hold bit-for-bit.

use thiserror::Error;

use crate::ratemat::{RateMatError, RateMatrix, StateDependentRateSpec};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("row {row} has a positive rate to state {col} beyond bandwidth {bandwidth} (1-based)")]
    BeyondBandwidth {
        row: usize,
        col: usize,
        bandwidth: usize,
    },
    #[error("row {row} jump intensity {intensity} exceeds K0 = {k0}")]
    IntensityExceedsK0 {
        row: usize,
        intensity: f64,
        k0: f64,
    },
    #[error("row {row} band offset {offset} exceeds c0 = {c0}")]
    BandExceedsC0 {
        row: usize,
        offset: usize,
        c0: usize,
    },
    #[error("mark window has zero measure")]
    EmptyWindow,
    #[error("window bound requires a global bandwidth (countable space without c̄)")]
    UnboundedBandwidth,
    #[error(transparent)]
    RateMat(#[from] RateMatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    Classical,
    ComparisonSigned,
    Block,
}

impl LayoutKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayoutKind::Classical => "classical",
            LayoutKind::ComparisonSigned => "comparison-signed",
            LayoutKind::Block => "block",
        }
    }
}

/// One target interval `[start, end)` generated by `rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetInterval {
    pub target: usize,
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

/// The intervals of one source state, sorted by start; zero-rate pairs are
/// absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateEntry {
    intervals: Vec<TargetInterval>,
}

impl StateEntry {
    pub fn intervals(&self) -> &[TargetInterval] {
        &self.intervals
    }

    fn finish(mut intervals: Vec<TargetInterval>) -> Self {
        intervals.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
        StateEntry { intervals }
    }

    /// Membership lookup with exact `[a, b)` comparisons, `O(log m)`.
    pub fn mark_to_jump(&self, z: f64) -> Option<usize> {
        let idx = self.intervals.partition_point(|iv| iv.start <= z);
        if idx == 0 {
            return None;
        }
        let iv = &self.intervals[idx - 1];
        (z < iv.end).then_some(iv.target)
    }

    /// Sum of generating rates, in stored (start-sorted) order.
    pub fn total_rate(&self) -> f64 {
        self.intervals.iter().map(|iv| iv.rate).sum()
    }

    /// Extent of the entry: most negative start and largest end.
    pub fn extent(&self) -> (f64, f64) {
        let lo = self.intervals.first().map_or(0.0, |iv| iv.start);
        let hi = self.intervals.last().map_or(0.0, |iv| iv.end);
        (lo.min(0.0), hi.max(0.0))
    }
}

/// Per-state entries of one generator under one layout kind.
#[derive(Debug, Clone)]
pub struct IntervalLayout {
    pub kind: LayoutKind,
    entries: Vec<StateEntry>,
}

impl IntervalLayout {
    pub fn entry(&self, state: usize) -> &StateEntry {
        &self.entries[state]
    }

    pub fn n_states(&self) -> usize {
        self.entries.len()
    }

    /// Debug dump, one line per interval: `i j a b kind` (1-based states,
    /// fixed decimal) — the golden-file format.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            for iv in e.intervals() {
                s.push_str(&format!(
                    "{} {} {:.6} {:.6} {}\n",
                    i + 1,
                    iv.target + 1,
                    iv.start,
                    iv.end,
                    self.kind.name()
                ));
            }
        }
        s
    }
}

/// Classical layout: row `i` starts at `Σ_{ℓ<i} |q_ℓℓ|` and its targets are
/// packed consecutively in ascending order, skipping the source.
pub fn build_classical_layout(q: &RateMatrix) -> IntervalLayout {
    let n = q.n_states();
    let mut entries = Vec::with_capacity(n);
    let mut offset = 0.0f64;
    for i in 0..n {
        let mut cum = offset;
        let mut intervals = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let r = q.rate(i, j);
            let start = cum;
            cum += r;
            if r > 0.0 {
                intervals.push(TargetInterval {
                    target: j,
                    start,
                    end: cum,
                    rate: r,
                });
            }
        }
        entries.push(StateEntry::finish(intervals));
        offset = cum;
    }
    IntervalLayout {
        kind: LayoutKind::Classical,
        entries,
    }
}

/// Comparison-signed entry for one source state from a rate row.
///
/// Downward targets `j < i` are packed on `[0, ∞)` in ascending `j`;
/// upward targets occupy `(-∞, 0)` with `Γ_{i,i+c_i}` adjacent to zero and
/// `Γ_{i,i+1}` farthest left. `c_i` must cover every positive upward rate;
/// the builder probes a few states beyond it.
pub fn comparison_entry_from_row(
    i: usize,
    c_i: usize,
    n_states: Option<usize>,
    rate: impl Fn(usize) -> f64,
) -> Result<StateEntry, LayoutError> {
    let mut intervals = Vec::new();
    let mut cum = 0.0f64;
    for j in 0..i {
        let r = rate(j);
        let start = cum;
        cum += r;
        if r > 0.0 {
            intervals.push(TargetInterval {
                target: j,
                start,
                end: cum,
                rate: r,
            });
        }
    }
    let top = match n_states {
        Some(n) => (i + c_i).min(n - 1),
        None => i + c_i,
    };
    let mut cum = 0.0f64;
    for j in (i + 1..=top).rev() {
        let r = rate(j);
        let end = -cum;
        cum += r;
        if r > 0.0 {
            intervals.push(TargetInterval {
                target: j,
                start: -cum,
                end,
                rate: r,
            });
        }
    }
    // a positive rate just beyond the declared bandwidth is a caller error
    let probe_top = match n_states {
        Some(n) => (i + c_i + 2).min(n.saturating_sub(1)),
        None => i + c_i + 2,
    };
    for j in (top + 1)..=probe_top {
        if rate(j) > 0.0 {
            return Err(LayoutError::BeyondBandwidth {
                row: i + 1,
                col: j + 1,
                bandwidth: c_i,
            });
        }
    }
    Ok(StateEntry::finish(intervals))
}

/// Comparison-signed layout of a constant generator (all states).
pub fn build_comparison_layout(q: &RateMatrix) -> Result<IntervalLayout, LayoutError> {
    let n = q.n_states();
    let c = q.bandwidth();
    let entries = (0..n)
        .map(|i| comparison_entry_from_row(i, c, Some(n), |j| q.rate(i, j)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IntervalLayout {
        kind: LayoutKind::ComparisonSigned,
        entries,
    })
}

/// Comparison-signed entry of a state-dependent spec at a frozen `x`.
pub fn comparison_entry_at(
    spec: &StateDependentRateSpec,
    i: usize,
    x: &[f64],
) -> Result<StateEntry, LayoutError> {
    let n = spec.space.finite();
    comparison_entry_from_row(i, spec.c_i(i), n, |j| spec.rate(i, j, x))
}

/// Left endpoint of the block-layout interval `Γ_nk`; depends only on
/// `(n, k, c₀, K₀)`. 1-based state arithmetic, 0-based arguments.
pub fn block_interval_left(state: usize, target: usize, c0: usize, k0: f64) -> f64 {
    let n = (state + 1) as f64;
    let k = (target + 1) as f64;
    let c0 = c0 as f64;
    if state == 0 {
        (k - 2.0) * k0
    } else if target < state {
        2.0 * (n - 1.0) * c0 * k0 - (n - k) * k0
    } else {
        2.0 * (n - 1.0) * c0 * k0 + (k - n - 1.0) * k0
    }
}

/// The block `U_n` owning state `n` (0-based argument, 1-based formula).
pub fn block_bounds(state: usize, c0: usize, k0: f64) -> (f64, f64) {
    let n = (state + 1) as f64;
    let c0 = c0 as f64;
    if state == 0 {
        (0.0, c0 * k0)
    } else {
        ((2.0 * n - 3.0) * c0 * k0, (2.0 * n - 1.0) * c0 * k0)
    }
}

/// Block layout of a constant generator under shared `(c₀, K₀)`.
pub fn build_block_layout(
    q: &RateMatrix,
    c0: usize,
    k0: f64,
) -> Result<IntervalLayout, LayoutError> {
    let n = q.n_states();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        entries.push(block_entry_from_row(i, c0, k0, Some(n), |j| q.rate(i, j))?);
        let intensity = q.row_intensity(i);
        if intensity > k0 {
            return Err(LayoutError::IntensityExceedsK0 {
                row: i + 1,
                intensity,
                k0,
            });
        }
    }
    Ok(IntervalLayout {
        kind: LayoutKind::Block,
        entries,
    })
}

/// Block entry for one source state.
pub fn block_entry_from_row(
    i: usize,
    c0: usize,
    k0: f64,
    n_states: Option<usize>,
    rate: impl Fn(usize) -> f64,
) -> Result<StateEntry, LayoutError> {
    let mut intervals = Vec::new();
    let lo = i.saturating_sub(c0);
    let hi = match n_states {
        Some(n) => (i + c0).min(n - 1),
        None => i + c0,
    };
    for j in lo..=hi {
        if j == i {
            continue;
        }
        let r = rate(j);
        if r > k0 {
            return Err(LayoutError::IntensityExceedsK0 {
                row: i + 1,
                intensity: r,
                k0,
            });
        }
        if r > 0.0 {
            let start = block_interval_left(i, j, c0, k0);
            intervals.push(TargetInterval {
                target: j,
                start,
                end: start + r,
                rate: r,
            });
        }
    }
    let probe_top = match n_states {
        Some(n) => (i + c0 + 2).min(n.saturating_sub(1)),
        None => i + c0 + 2,
    };
    for j in (hi + 1)..=probe_top {
        if rate(j) > 0.0 {
            return Err(LayoutError::BandExceedsC0 {
                row: i + 1,
                offset: j - i,
                c0,
            });
        }
    }
    if i >= c0 + 1 {
        for j in i.saturating_sub(c0 + 2)..lo {
            if rate(j) > 0.0 {
                return Err(LayoutError::BandExceedsC0 {
                    row: i + 1,
                    offset: i - j,
                    c0,
                });
            }
        }
    }
    Ok(StateEntry::finish(intervals))
}

/// The real set marks must cover.
#[derive(Debug, Clone, PartialEq)]
pub enum MarkWindow {
    /// `[-k_mark, k_mark]`, the window of classical and comparison layouts.
    Symmetric { k_mark: f64 },
    /// Union of blocks `(state, [a, b))`, the window of block layouts.
    Blocks { blocks: Vec<(usize, f64, f64)> },
}

impl MarkWindow {
    pub fn measure(&self) -> f64 {
        match self {
            MarkWindow::Symmetric { k_mark } => 2.0 * k_mark,
            MarkWindow::Blocks { blocks } => blocks.iter().map(|(_, a, b)| b - a).sum(),
        }
    }

    pub fn contains(&self, z: f64) -> bool {
        match self {
            MarkWindow::Symmetric { k_mark } => (-*k_mark..=*k_mark).contains(&z),
            MarkWindow::Blocks { blocks } => blocks.iter().any(|(_, a, b)| *a <= z && z < *b),
        }
    }

    /// Maps `u ∈ [0, 1)` to a point of the window, uniformly in measure.
    pub fn position(&self, u: f64) -> f64 {
        match self {
            MarkWindow::Symmetric { k_mark } => -k_mark + u * 2.0 * k_mark,
            MarkWindow::Blocks { blocks } => {
                let mut rest = u * self.measure();
                for (_, a, b) in blocks {
                    let len = b - a;
                    if rest < len {
                        return a + rest;
                    }
                    rest -= len;
                }
                blocks.last().map(|(_, _, b)| *b).unwrap_or(0.0)
            }
        }
    }

    /// Every interval of the layout inside the window?
    pub fn covers(&self, layout: &IntervalLayout) -> bool {
        (0..layout.n_states()).all(|i| {
            layout.entry(i).intervals().iter().all(|iv| match self {
                MarkWindow::Symmetric { k_mark } => iv.start >= -k_mark && iv.end <= *k_mark,
                MarkWindow::Blocks { blocks } => blocks
                    .iter()
                    .any(|(_, a, b)| *a <= iv.start && iv.end <= *b),
            })
        })
    }
}

/// Per-state half-row sums of one participating generator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HalfRowSums {
    pub down: f64,
    pub up: f64,
}

pub fn half_row_sums(q: &RateMatrix) -> Vec<HalfRowSums> {
    (0..q.n_states())
        .map(|i| {
            let (down, up) = q.half_row_sums(i);
            HalfRowSums { down, up }
        })
        .collect()
}

/// Symmetric window guaranteed to cover the comparison layout of every
/// participating generator: `K_mark` is the largest per-state half-row sum
/// across participants. Extra width only adds thinned marks; it never
/// changes jump rates.
pub fn required_mark_window(participants: &[&[HalfRowSums]]) -> Result<MarkWindow, LayoutError> {
    let mut k_mark = 0.0f64;
    for p in participants {
        for h in *p {
            k_mark = k_mark.max(h.down).max(h.up);
        }
    }
    if k_mark <= 0.0 {
        return Err(LayoutError::EmptyWindow);
    }
    Ok(MarkWindow::Symmetric { k_mark })
}

/// Symmetric window covering a classical layout: `[-T, T]` with `T` the
/// total layout measure (marks on the negative half are thinned).
pub fn classical_mark_window(q: &RateMatrix) -> Result<MarkWindow, LayoutError> {
    let total: f64 = (0..q.n_states()).map(|i| q.row_intensity(i)).sum();
    if total <= 0.0 {
        return Err(LayoutError::EmptyWindow);
    }
    Ok(MarkWindow::Symmetric { k_mark: total })
}

/// Window of a block layout: the union of the given states' blocks.
pub fn block_window(states: &[usize], c0: usize, k0: f64) -> Result<MarkWindow, LayoutError> {
    if states.is_empty() || c0 == 0 || k0 <= 0.0 {
        return Err(LayoutError::EmptyWindow);
    }
    let mut blocks: Vec<(usize, f64, f64)> = states
        .iter()
        .map(|&s| {
            let (a, b) = block_bounds(s, c0, k0);
            (s, a, b)
        })
        .collect();
    blocks.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
    blocks.dedup();
    Ok(MarkWindow::Blocks { blocks })
}
