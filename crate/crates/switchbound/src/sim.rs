//! Event-driven simulation of switching chains and hybrid diffusions.
//!
//! Chains are exact realizations: at every Poisson event the mark either
//! falls into one of the current state's intervals (jump) or is thinned (no
//! jump), so the only discretization error anywhere is the Euler–Maruyama
//! step of the continuous component, which never affects jump times or — in
//! the coupled constructions — the pathwise order of the chains.
//!
//! Coupled processes share one stream by construction: the comparison bundle
//! `(X, Λ, Λ*, Λ̄)` consumes a single global clock, the perturbation pair
//! `(Λ, Λ̃)` a single block-clock ensemble. No per-chain clocks exist in
//! coupled mode.

use std::sync::Arc;

use thiserror::Error;

use crate::clocks::{
    global_clock, BlockClockEnsemble, ClockError, CounterRng, StreamSpec, NOISE_BLOCK,
};
use crate::layout::{
    block_entry_from_row, build_block_layout, build_classical_layout, build_comparison_layout,
    classical_mark_window, comparison_entry_at, comparison_entry_from_row, half_row_sums,
    required_mark_window, HalfRowSums, IntervalLayout, LayoutError, LayoutKind, MarkWindow,
    StateEntry,
};
use crate::ratemat::{EnvelopePair, RateMatError, RateMatrix, StateDependentRateSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    RateMat(#[from] RateMatError),
    #[error("bad simulation parameters: {0}")]
    BadParams(String),
    #[error(
        "mark window coverage violated at state {state}: entry extent {extent} vs K_mark {k_mark} \
         (internal error, the window bound is wrong)"
    )]
    MarkWindowCoverage {
        state: usize,
        extent: f64,
        k_mark: f64,
    },
}

/// Piecewise-constant switching path, right-continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub initial: usize,
    /// `(jump time, new state)`, strictly increasing times.
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl ChainPath {
    pub fn constant(initial: usize, horizon: f64) -> Self {
        ChainPath {
            initial,
            jumps: Vec::new(),
            horizon,
        }
    }

    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jumps.partition_point(|&(s, _)| s <= t);
        if idx == 0 {
            self.initial
        } else {
            self.jumps[idx - 1].1
        }
    }
}

/// Drift and volatility oracles plus optional Lyapunov metadata.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub dim: usize,
    drift: Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>,
    /// writes the `d×d` volatility matrix row-major
    vol: Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>,
    pub lyapunov: Option<LyapunovData>,
}

#[derive(Clone)]
pub struct LyapunovData {
    pub rho: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub beta: Vec<f64>,
    pub p: f64,
    pub c_tilde: f64,
}

impl std::fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("dim", &self.dim)
            .field("has_lyapunov", &self.lyapunov.is_some())
            .finish()
    }
}

impl DiffusionSpec {
    pub fn new(
        dim: usize,
        drift: impl Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static,
        vol: impl Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        DiffusionSpec {
            dim,
            drift: Arc::new(drift),
            vol: Arc::new(vol),
            lyapunov: None,
        }
    }

    /// The linear 1-d family `dX = b_i X dt + s_i X dB` with per-regime
    /// coefficients; `ρ(x) = x²` gives `β_i = 2 b_i + s_i²`.
    pub fn linear(drift_coeffs: Vec<f64>, vol_coeffs: Vec<f64>) -> Self {
        let b = drift_coeffs.clone();
        let s = vol_coeffs.clone();
        let beta: Vec<f64> = drift_coeffs
            .iter()
            .zip(&vol_coeffs)
            .map(|(bi, si)| 2.0 * bi + si * si)
            .collect();
        let mut spec = DiffusionSpec::new(
            1,
            move |x, i, out| out[0] = b.get(i).copied().unwrap_or(0.0) * x[0],
            move |x, i, out| out[0] = s.get(i).copied().unwrap_or(0.0) * x[0],
        );
        spec.lyapunov = Some(LyapunovData {
            rho: Arc::new(|x: &[f64]| x[0] * x[0]),
            beta,
            p: 2.0,
            c_tilde: 1.0,
        });
        spec
    }

    pub fn drift_into(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        (self.drift)(x, regime, out)
    }

    pub fn vol_into(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        (self.vol)(x, regime, out)
    }
}

/// Source of standard normal increments; the production source is a
/// [`CounterRng`] on the noise lane, tests may substitute recorded paths.
pub trait GaussianSource {
    fn fill_standard_normal(&mut self, out: &mut [f64]);
}

impl GaussianSource for CounterRng {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }
}

/// Sampled continuous component: values at `t = 0`, requested sample times,
/// switching epochs and the horizon (not every integration step).
#[derive(Debug, Clone, Default)]
pub struct DiffusionPath {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// First time a non-finite value appeared; the replica ends there.
    pub diverged: Option<f64>,
}

impl DiffusionPath {
    fn record(&mut self, t: f64, x: &[f64]) {
        if let Some(&last) = self.times.last() {
            if t == last {
                return;
            }
        }
        self.times.push(t);
        self.values.push(x.to_vec());
    }

    /// Value at `t`: exact at recorded points, linear in between.
    pub fn value_at(&self, t: f64) -> Option<Vec<f64>> {
        if self.times.is_empty() {
            return None;
        }
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            return Some(self.values[0].clone());
        }
        if idx == self.times.len() {
            return Some(self.values[idx - 1].clone());
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        Some(
            self.values[idx - 1]
                .iter()
                .zip(&self.values[idx])
                .map(|(a, b)| a + w * (b - a))
                .collect(),
        )
    }
}

struct EmScratch {
    drift: Vec<f64>,
    vol: Vec<f64>,
    z: Vec<f64>,
}

impl EmScratch {
    fn new(d: usize) -> Self {
        EmScratch {
            drift: vec![0.0; d],
            vol: vec![0.0; d * d],
            z: vec![0.0; d],
        }
    }
}

/// One explicit Euler–Maruyama step of size `h` in a frozen regime.
fn em_step(
    dspec: &DiffusionSpec,
    regime: usize,
    x: &mut [f64],
    h: f64,
    noise: &mut impl GaussianSource,
    s: &mut EmScratch,
) {
    let d = dspec.dim;
    dspec.drift_into(x, regime, &mut s.drift);
    dspec.vol_into(x, regime, &mut s.vol);
    noise.fill_standard_normal(&mut s.z);
    let sqrt_h = h.sqrt();
    for i in 0..d {
        let mut dw = 0.0;
        for j in 0..d {
            dw += s.vol[i * d + j] * s.z[j];
        }
        x[i] += s.drift[i] * h + sqrt_h * dw;
    }
}

/// Marches `x` from `t0` to `t1` on the global uniform grid (multiples of
/// `dt` interior to the segment, endpoint exactly at `t1`). Returns the time
/// of divergence if a non-finite value appears.
#[allow(clippy::too_many_arguments)]
fn em_march(
    dspec: &DiffusionSpec,
    regime: usize,
    x: &mut [f64],
    t0: f64,
    t1: f64,
    dt: f64,
    noise: &mut impl GaussianSource,
    s: &mut EmScratch,
    mut on_point: impl FnMut(f64, &[f64]),
) -> Result<(), f64> {
    let mut t = t0;
    let mut k = (t0 / dt).floor() as i64 + 1;
    loop {
        let grid_t = k as f64 * dt;
        let next = if grid_t < t1 { grid_t } else { t1 };
        if next > t {
            em_step(dspec, regime, x, next - t, noise, s);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(next);
            }
            on_point(next, x);
            t = next;
        }
        if next >= t1 {
            return Ok(());
        }
        k += 1;
    }
}

/// Standalone Euler–Maruyama segment: returns the visited grid points
/// (endpoint exactly at `t1`).
pub fn euler_maruyama_segment(
    dspec: &DiffusionSpec,
    regime: usize,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    noise: &mut impl GaussianSource,
) -> Result<Vec<(f64, Vec<f64>)>, SimError> {
    if !(t1 > t0) || !(dt > 0.0) {
        return Err(SimError::BadParams(format!(
            "need t1 > t0 and dt > 0, got t0={t0}, t1={t1}, dt={dt}"
        )));
    }
    let mut x = x0.to_vec();
    let mut scratch = EmScratch::new(dspec.dim);
    let mut points = vec![(t0, x.clone())];
    let r = em_march(
        dspec,
        regime,
        &mut x,
        t0,
        t1,
        dt,
        noise,
        &mut scratch,
        |t, v| points.push((t, v.to_vec())),
    );
    match r {
        Ok(()) => Ok(points),
        Err(t) => Err(SimError::BadParams(format!(
            "diffusion diverged (non-finite state) at t = {t}"
        ))),
    }
}

/// Exact CTMC realization of a constant generator under the chosen layout.
pub fn simulate_chain(
    q: &RateMatrix,
    kind: LayoutKind,
    i0: usize,
    horizon: f64,
    spec: &StreamSpec,
) -> Result<ChainPath, SimError> {
    match kind {
        LayoutKind::Classical | LayoutKind::ComparisonSigned => {
            let total: f64 = (0..q.n_states()).map(|i| q.row_intensity(i)).sum();
            if total <= 0.0 {
                return Ok(ChainPath::constant(i0, horizon));
            }
            let window = match kind {
                LayoutKind::Classical => classical_mark_window(q)?,
                _ => {
                    let hs = half_row_sums(q);
                    required_mark_window(&[&hs])?
                }
            };
            simulate_chain_with_window(q, kind, &window, i0, horizon, spec)
        }
        LayoutKind::Block => {
            let k0 = q.k0();
            if k0 <= 0.0 {
                return Ok(ChainPath::constant(i0, horizon));
            }
            let c0 = q.max_positive_offset().max(1);
            let layout = build_block_layout(q, c0, k0)?;
            let mut ens = BlockClockEnsemble::new(c0, k0, horizon, *spec);
            let mut state = i0;
            let mut t = 0.0;
            let mut jumps = Vec::new();
            while let Some((e, _)) = ens.next_event(t, &[state]) {
                t = e.time;
                if let Some(j) = layout.entry(state).mark_to_jump(e.mark) {
                    state = j;
                    jumps.push((t, j));
                }
            }
            Ok(ChainPath {
                initial: i0,
                jumps,
                horizon,
            })
        }
    }
}

/// Like [`simulate_chain`] for classical/comparison layouts, but with an
/// explicit mark window. Two layout kinds driven through the same window and
/// stream consume identical events, which isolates the effect of interval
/// ordering on the paths.
pub fn simulate_chain_with_window(
    q: &RateMatrix,
    kind: LayoutKind,
    window: &MarkWindow,
    i0: usize,
    horizon: f64,
    spec: &StreamSpec,
) -> Result<ChainPath, SimError> {
    let layout: IntervalLayout = match kind {
        LayoutKind::Classical => build_classical_layout(q),
        LayoutKind::ComparisonSigned => build_comparison_layout(q)?,
        LayoutKind::Block => {
            return Err(SimError::BadParams(
                "block layouts are driven by a block-clock ensemble".into(),
            ))
        }
    };
    if !window.covers(&layout) {
        return Err(SimError::BadParams(
            "window does not cover the layout".into(),
        ));
    }
    let stream = global_clock(window, horizon, &spec.with_block(0))?;
    let mut state = i0;
    let mut jumps = Vec::new();
    for e in &stream.events {
        if let Some(j) = layout.entry(state).mark_to_jump(e.mark) {
            state = j;
            jumps.push((e.time, j));
        }
    }
    Ok(ChainPath {
        initial: i0,
        jumps,
        horizon,
    })
}

/// The coupled quadruple `(X, Λ, Λ*, Λ̄)` from one global clock.
#[derive(Debug, Clone)]
pub struct ComparisonBundle {
    /// state-dependent switching component
    pub lam: ChainPath,
    /// lower envelope chain (q*)
    pub lower: ChainPath,
    /// upper envelope chain (q̄)
    pub upper: ChainPath,
    pub diffusion: DiffusionPath,
    pub k_mark: f64,
}

#[derive(Debug, Clone)]
pub struct BundleParams {
    pub x0: Vec<f64>,
    pub i0: usize,
    pub horizon: f64,
    pub dt: f64,
    /// extra times at which the diffusion is recorded
    pub sample_times: Vec<f64>,
}

/// Mark window covering the state-dependent rows (via their sup envelope)
/// and both envelope generators; compute once per scenario.
pub fn comparison_mark_window(
    spec: &StateDependentRateSpec,
    env: &EnvelopePair,
) -> Result<MarkWindow, SimError> {
    let n = spec.space.finite().ok_or(RateMatError::Countable)?;
    let mut sup_rows = Vec::with_capacity(n);
    for i in 0..n {
        let (down, up) = spec.sup_half_row_sums(i, n)?;
        sup_rows.push(HalfRowSums { down, up });
    }
    let lower = half_row_sums(&env.lower);
    let upper = half_row_sums(&env.upper);
    Ok(required_mark_window(&[&sup_rows, &lower, &upper])?)
}

/// Simulates the comparison bundle: Λ reads its intervals from the rate
/// oracle at the current Euler–Maruyama value of `X`, Λ* and Λ̄ from the
/// constant envelope layouts, all three applied to the same marks. The
/// pathwise order `Λ* ≤ Λ ≤ Λ̄` holds exactly at every event time
/// independent of `dt`.
pub fn simulate_comparison_bundle(
    spec: &StateDependentRateSpec,
    env: &EnvelopePair,
    dspec: &DiffusionSpec,
    window: &MarkWindow,
    params: &BundleParams,
    stream: &StreamSpec,
) -> Result<ComparisonBundle, SimError> {
    let n = spec.space.finite().ok_or(RateMatError::Countable)?;
    if params.i0 >= n {
        return Err(SimError::BadParams(format!(
            "initial regime {} outside the {}-state space",
            params.i0 + 1,
            n
        )));
    }
    if !(params.horizon > 0.0) || !(params.dt > 0.0) {
        return Err(SimError::BadParams("need horizon > 0 and dt > 0".into()));
    }
    if params.x0.len() != dspec.dim {
        return Err(SimError::BadParams(format!(
            "x0 has dimension {}, diffusion has {}",
            params.x0.len(),
            dspec.dim
        )));
    }
    let k_mark = match window {
        MarkWindow::Symmetric { k_mark } => *k_mark,
        _ => {
            return Err(SimError::BadParams(
                "comparison bundles use a symmetric window".into(),
            ))
        }
    };

    let lower_entries: Vec<StateEntry> = (0..n)
        .map(|i| {
            comparison_entry_from_row(i, env.lower.bandwidth(), Some(n), |j| env.lower.rate(i, j))
        })
        .collect::<Result<_, _>>()?;
    let upper_entries: Vec<StateEntry> = (0..n)
        .map(|i| {
            comparison_entry_from_row(i, env.upper.bandwidth(), Some(n), |j| env.upper.rate(i, j))
        })
        .collect::<Result<_, _>>()?;

    let events = global_clock(window, params.horizon, &stream.with_block(0))?;
    let mut noise = stream.with_block(NOISE_BLOCK).rng();
    let mut scratch = EmScratch::new(dspec.dim);

    enum Bp {
        Mark(f64),
        Sample,
    }
    let mut bps: Vec<(f64, Bp)> = events
        .events
        .iter()
        .map(|e| (e.time, Bp::Mark(e.mark)))
        .chain(
            params
                .sample_times
                .iter()
                .filter(|&&t| t > 0.0 && t <= params.horizon)
                .map(|&t| (t, Bp::Sample)),
        )
        .collect();
    // marks first at (probability-zero) ties so sampled regimes stay
    // right-continuous
    bps.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then_with(|| {
            let rank = |x: &Bp| match x {
                Bp::Mark(_) => 0u8,
                Bp::Sample => 1u8,
            };
            rank(&a.1).cmp(&rank(&b.1))
        })
    });

    let mut x = params.x0.clone();
    let (mut lam, mut lo, mut hi) = (params.i0, params.i0, params.i0);
    let mut lam_path = ChainPath::constant(params.i0, params.horizon);
    let mut lower_path = ChainPath::constant(params.i0, params.horizon);
    let mut upper_path = ChainPath::constant(params.i0, params.horizon);
    let mut diffusion = DiffusionPath::default();
    diffusion.record(0.0, &x);

    let mut t = 0.0f64;
    for (bt, bp) in bps {
        if bt > t {
            let r = em_march(
                dspec,
                lam,
                &mut x,
                t,
                bt,
                params.dt,
                &mut noise,
                &mut scratch,
                |_, _| {},
            );
            t = bt;
            if let Err(td) = r {
                diffusion.diverged = Some(td);
                lam_path.horizon = td;
                lower_path.horizon = td;
                upper_path.horizon = td;
                return Ok(ComparisonBundle {
                    lam: lam_path,
                    lower: lower_path,
                    upper: upper_path,
                    diffusion,
                    k_mark,
                });
            }
        }
        match bp {
            Bp::Mark(z) => {
                let entry = comparison_entry_at(spec, lam, &x)?;
                let (elo, ehi) = entry.extent();
                if elo < -k_mark || ehi > k_mark {
                    return Err(SimError::MarkWindowCoverage {
                        state: lam + 1,
                        extent: elo.abs().max(ehi),
                        k_mark,
                    });
                }
                if let Some(j) = entry.mark_to_jump(z) {
                    lam = j;
                    lam_path.jumps.push((t, j));
                    diffusion.record(t, &x);
                }
                if let Some(j) = lower_entries[lo].mark_to_jump(z) {
                    lo = j;
                    lower_path.jumps.push((t, j));
                }
                if let Some(j) = upper_entries[hi].mark_to_jump(z) {
                    hi = j;
                    upper_path.jumps.push((t, j));
                }
            }
            Bp::Sample => diffusion.record(t, &x),
        }
    }
    if params.horizon > t {
        let r = em_march(
            dspec,
            lam,
            &mut x,
            t,
            params.horizon,
            params.dt,
            &mut noise,
            &mut scratch,
            |_, _| {},
        );
        if let Err(td) = r {
            diffusion.diverged = Some(td);
        }
    }
    diffusion.record(params.horizon, &x);
    Ok(ComparisonBundle {
        lam: lam_path,
        lower: lower_path,
        upper: upper_path,
        diffusion,
        k_mark,
    })
}

/// The coupled pair `(Λ, Λ̃)` on one block-clock ensemble.
#[derive(Debug, Clone)]
pub struct PerturbationPair {
    pub base: ChainPath,
    pub perturbed: ChainPath,
}

/// Simulates the perturbation pair; both chains read the same lazily
/// activated ensemble, so while they sit in a common state they separate
/// only when a mark lands in a symmetric difference `Γ_kj Δ Γ̃_kj`.
pub fn simulate_perturbation_pair(
    q: &RateMatrix,
    qt: &RateMatrix,
    c0: usize,
    k0: f64,
    i0: usize,
    horizon: f64,
    stream: &StreamSpec,
) -> Result<PerturbationPair, SimError> {
    simulate_perturbation_pair_impl(q, qt, c0, k0, i0, horizon, stream, None)
}

/// As [`simulate_perturbation_pair`], also returning the consulted events
/// `(time, mark)` for coupling diagnostics.
pub fn simulate_perturbation_pair_traced(
    q: &RateMatrix,
    qt: &RateMatrix,
    c0: usize,
    k0: f64,
    i0: usize,
    horizon: f64,
    stream: &StreamSpec,
) -> Result<(PerturbationPair, Vec<(f64, f64)>), SimError> {
    let mut trace = Vec::new();
    let pair =
        simulate_perturbation_pair_impl(q, qt, c0, k0, i0, horizon, stream, Some(&mut trace))?;
    Ok((pair, trace))
}

#[allow(clippy::too_many_arguments)]
fn simulate_perturbation_pair_impl(
    q: &RateMatrix,
    qt: &RateMatrix,
    c0: usize,
    k0: f64,
    i0: usize,
    horizon: f64,
    stream: &StreamSpec,
    mut trace: Option<&mut Vec<(f64, f64)>>,
) -> Result<PerturbationPair, SimError> {
    let n = q.n_states();
    if n != qt.n_states() {
        return Err(RateMatError::DimensionMismatch(n, qt.n_states()).into());
    }
    if i0 >= n {
        return Err(SimError::BadParams(format!(
            "initial state {} outside the {}-state space",
            i0 + 1,
            n
        )));
    }
    if k0 <= 0.0 {
        return Ok(PerturbationPair {
            base: ChainPath::constant(i0, horizon),
            perturbed: ChainPath::constant(i0, horizon),
        });
    }
    let layout_q = build_block_layout(q, c0, k0)?;
    let layout_qt = build_block_layout(qt, c0, k0)?;
    let mut ens = BlockClockEnsemble::new(c0, k0, horizon, *stream);
    let (mut a, mut b) = (i0, i0);
    let mut base = ChainPath::constant(i0, horizon);
    let mut perturbed = ChainPath::constant(i0, horizon);
    let mut t = 0.0;
    loop {
        let active: &[usize] = if a == b { &[a][..] } else { &[a, b][..] };
        let next = ens.next_event(t, active);
        let Some((e, _)) = next else { break };
        t = e.time;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((e.time, e.mark));
        }
        if let Some(j) = layout_q.entry(a).mark_to_jump(e.mark) {
            a = j;
            base.jumps.push((t, j));
        }
        if let Some(j) = layout_qt.entry(b).mark_to_jump(e.mark) {
            b = j;
            perturbed.jumps.push((t, j));
        }
    }
    Ok(PerturbationPair { base, perturbed })
}

/// Block entry of a countable-space rate oracle (lazy per-state layouts).
pub fn block_entry_from_oracle(
    rate: impl Fn(usize, usize) -> f64,
    i: usize,
    c0: usize,
    k0: f64,
) -> Result<StateEntry, SimError> {
    Ok(block_entry_from_row(i, c0, k0, None, |j| rate(i, j))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratemat::transition_semigroup;
    use approx::assert_abs_diff_eq;

    fn stream(replica: u64) -> StreamSpec {
        StreamSpec::new(0xd1ce, 1, replica)
    }

    #[test]
    fn zero_generator_gives_constant_path() {
        let q = RateMatrix::zero(3, 1);
        for kind in [
            LayoutKind::Classical,
            LayoutKind::ComparisonSigned,
            LayoutKind::Block,
        ] {
            let p = simulate_chain(&q, kind, 1, 5.0, &stream(0)).unwrap();
            assert!(p.jumps.is_empty());
            assert_eq!(p.state_at(3.0), 1);
        }
    }

    #[test]
    fn two_state_marginal_matches_semigroup() {
        let q = RateMatrix::from_offdiag_fn(2, 1, |_, _| 1.0).unwrap();
        let replicas = 100_000;
        let mut hits = 0usize;
        for r in 0..replicas {
            let p = simulate_chain(&q, LayoutKind::Classical, 0, 1.0, &stream(r as u64)).unwrap();
            if p.state_at(1.0) == 1 {
                hits += 1;
            }
        }
        let expect = 0.5 * (1.0 - (-2.0f64).exp());
        let phat = hits as f64 / replicas as f64;
        let sd = (expect * (1.0 - expect) / replicas as f64).sqrt();
        let z = (phat - expect) / sd;
        assert!(z.abs() < 4.0, "z = {z}");
    }

    #[test]
    fn block_kind_marginal_matches_semigroup() {
        let q = RateMatrix::from_offdiag_fn(3, 1, |i, j| ((i + j) % 3) as f64 * 0.5 + 0.5).unwrap();
        let replicas = 40_000;
        let t = 0.7;
        let mut counts = [0usize; 3];
        for r in 0..replicas {
            let p = simulate_chain(&q, LayoutKind::Block, 0, t, &stream(r as u64)).unwrap();
            counts[p.state_at(t)] += 1;
        }
        let sg = transition_semigroup(&q, t).unwrap();
        for j in 0..3 {
            let expect = sg[(0, j)];
            let phat = counts[j] as f64 / replicas as f64;
            let sd = (expect * (1.0 - expect) / replicas as f64).sqrt();
            assert!(
                ((phat - expect) / sd).abs() < 4.5,
                "state {j}: {phat} vs {expect}"
            );
        }
    }

    #[test]
    fn em_deterministic_ode_case() {
        // σ ≡ 0, b(x) = b·x on the grid: X(t1) = x0 (1 + b dt)^steps
        struct NoNoise;
        impl GaussianSource for NoNoise {
            fn fill_standard_normal(&mut self, out: &mut [f64]) {
                out.fill(0.0);
            }
        }
        let b = 0.7;
        let dspec = DiffusionSpec::new(
            1,
            move |x, _, out| out[0] = b * x[0],
            |_, _, out| out[0] = 0.0,
        );
        let dt = 1e-3;
        let steps = 1000;
        let pts =
            euler_maruyama_segment(&dspec, 0, &[1.0], 0.0, steps as f64 * dt, dt, &mut NoNoise)
                .unwrap();
        let expect = (1.0 + b * dt).powi(steps);
        let got = pts.last().unwrap().1[0];
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12 * expect);
        // and (1 + b·dt)^steps → e^{b t} as dt → 0
        assert!((got - (b * 1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn em_gbm_second_moment() {
        // E X_t² = x0² e^{(2b+σ²)t}
        let (b, s) = (0.05, 0.2);
        let dspec = DiffusionSpec::linear(vec![b], vec![s]);
        let t = 1.0;
        let replicas = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for r in 0..replicas {
            let mut noise = stream(r as u64).with_block(NOISE_BLOCK).rng();
            let pts = euler_maruyama_segment(&dspec, 0, &[1.0], 0.0, t, 1e-3, &mut noise).unwrap();
            let v = pts.last().unwrap().1[0];
            sum += v * v;
            sumsq += v * v * v * v;
        }
        let nf = replicas as f64;
        let mean = sum / nf;
        let se = ((sumsq / nf - mean * mean) / nf).sqrt();
        let expect = ((2.0 * b + s * s) * t).exp();
        // 3σ band plus the O(dt) weak bias at dt = 1e-3
        assert!(
            (mean - expect).abs() < 3.0 * se + 2e-3 * expect,
            "mean {mean} vs {expect} (se {se})"
        );
    }

    #[test]
    fn em_strong_order_half() {
        // strong error vs a shared fine Brownian path decays like dt^0.5
        struct SharedNoise<'a> {
            fine: &'a [f64],
            pos: usize,
            agg: usize, // fine steps per coarse step
        }
        impl GaussianSource for SharedNoise<'_> {
            fn fill_standard_normal(&mut self, out: &mut [f64]) {
                let mut s = 0.0;
                for _ in 0..self.agg {
                    s += self.fine[self.pos];
                    self.pos += 1;
                }
                out[0] = s / (self.agg as f64).sqrt();
            }
        }
        let dspec = DiffusionSpec::linear(vec![0.1], vec![0.4]);
        let t = 1.0;
        let fine_n = 4096;
        let mut errors = Vec::new();
        for &agg in &[16usize, 4] {
            let dt = t * agg as f64 / fine_n as f64;
            let mut err = 0.0;
            let replicas = 4000;
            for r in 0..replicas {
                let mut rng = stream(r as u64).with_block(NOISE_BLOCK).rng();
                let fine: Vec<f64> = (0..fine_n).map(|_| rng.standard_normal()).collect();
                let mut refr = SharedNoise {
                    fine: &fine,
                    pos: 0,
                    agg: 1,
                };
                let xr = euler_maruyama_segment(
                    &dspec,
                    0,
                    &[1.0],
                    0.0,
                    t,
                    t / fine_n as f64,
                    &mut refr,
                )
                .unwrap()
                .last()
                .unwrap()
                .1[0];
                let mut coarse = SharedNoise {
                    fine: &fine,
                    pos: 0,
                    agg,
                };
                let xc = euler_maruyama_segment(&dspec, 0, &[1.0], 0.0, t, dt, &mut coarse)
                    .unwrap()
                    .last()
                    .unwrap()
                    .1[0];
                err += (xr - xc).abs();
            }
            errors.push(err / replicas as f64);
        }
        let slope = (errors[0] / errors[1]).ln() / 4.0f64.ln();
        assert!(
            (slope - 0.5).abs() < 0.2,
            "strong order slope {slope}, errors {errors:?}"
        );
    }

    #[test]
    fn perturbation_pair_identical_generators_never_separate() {
        let q =
            RateMatrix::from_offdiag_fn(3, 1, |i, j| ((i + 2 * j) % 3) as f64 * 0.4 + 0.3).unwrap();
        for r in 0..200 {
            let p = simulate_perturbation_pair(&q, &q, 1, q.k0(), 1, 10.0, &stream(r)).unwrap();
            assert_eq!(p.base, p.perturbed);
        }
    }

    #[test]
    fn perturbation_pair_separates_only_in_symmetric_differences() {
        let q = RateMatrix::from_dense_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let qt = RateMatrix::from_dense_rows(&[vec![-2.0, 2.0], vec![2.0, -2.0]]).unwrap();
        let (c0, k0) = (1, 2.0);
        let lq = build_block_layout(&q, c0, k0).unwrap();
        let lqt = build_block_layout(&qt, c0, k0).unwrap();
        for r in 0..200 {
            let (pair, trace) =
                simulate_perturbation_pair_traced(&q, &qt, c0, k0, 0, 5.0, &stream(r)).unwrap();
            for &(t, mark) in &trace {
                let before = t.next_down();
                let (a0, b0) = (pair.base.state_at(before), pair.perturbed.state_at(before));
                let (a1, b1) = (pair.base.state_at(t), pair.perturbed.state_at(t));
                if a0 == b0 && a1 != b1 {
                    let in_q = lq.entry(a0).mark_to_jump(mark);
                    let in_qt = lqt.entry(a0).mark_to_jump(mark);
                    assert!(
                        in_q != in_qt,
                        "separation at t={t} with mark {mark} outside any symmetric difference"
                    );
                }
            }
        }
    }

    #[test]
    fn bundles_are_deterministic() {
        let spec = crate::ratemat::bounded_quadratic_family(3, 1.0, 1.0);
        let env = crate::ratemat::envelope_matrices(&spec).unwrap();
        let dspec = DiffusionSpec::linear(vec![1.0, 0.0, -1.0], vec![1.0, 1.0, 1.0]);
        let window = comparison_mark_window(&spec, &env).unwrap();
        let params = BundleParams {
            x0: vec![1.0],
            i0: 1,
            horizon: 2.0,
            dt: 1e-3,
            sample_times: vec![1.0, 2.0],
        };
        let a =
            simulate_comparison_bundle(&spec, &env, &dspec, &window, &params, &stream(7)).unwrap();
        let b =
            simulate_comparison_bundle(&spec, &env, &dspec, &window, &params, &stream(7)).unwrap();
        assert_eq!(a.lam, b.lam);
        assert_eq!(a.lower, b.lower);
        assert_eq!(a.upper, b.upper);
        assert_eq!(a.diffusion.values, b.diffusion.values);
        let c =
            simulate_comparison_bundle(&spec, &env, &dspec, &window, &params, &stream(8)).unwrap();
        assert!(a.lam != c.lam || a.diffusion.values != c.diffusion.values);
    }

    #[test]
    fn constant_birth_death_collapses_the_bundle() {
        // state-independent birth–death: q* = q̄ = Q and the marks coincide,
        // so all three chains are pathwise identical
        let q = RateMatrix::from_offdiag_fn(4, 1, |i, j| {
            if j == i + 1 {
                0.8
            } else if j + 1 == i {
                1.2
            } else {
                0.0
            }
        })
        .unwrap();
        let spec = StateDependentRateSpec::from_matrix(&q);
        let env = crate::ratemat::envelope_matrices(&spec).unwrap();
        let dspec = DiffusionSpec::linear(vec![0.0; 4], vec![0.0; 4]);
        let window = comparison_mark_window(&spec, &env).unwrap();
        let params = BundleParams {
            x0: vec![1.0],
            i0: 2,
            horizon: 10.0,
            dt: 1e-2,
            sample_times: vec![],
        };
        for r in 0..100 {
            let bundle =
                simulate_comparison_bundle(&spec, &env, &dspec, &window, &params, &stream(r))
                    .unwrap();
            assert_eq!(bundle.lam, bundle.lower);
            assert_eq!(bundle.lam, bundle.upper);
        }
    }

    #[test]
    fn bundle_preserves_pathwise_order_on_example_spec() {
        let spec = crate::ratemat::bounded_quadratic_family(3, 1.0, 1.0);
        let env = crate::ratemat::envelope_matrices(&spec).unwrap();
        let dspec = DiffusionSpec::linear(vec![1.0, 0.0, -1.0], vec![1.0, 1.0, 1.0]);
        let window = comparison_mark_window(&spec, &env).unwrap();
        let params = BundleParams {
            x0: vec![1.0],
            i0: 1,
            horizon: 5.0,
            dt: 1e-2,
            sample_times: vec![],
        };
        for r in 0..300 {
            let b = simulate_comparison_bundle(&spec, &env, &dspec, &window, &params, &stream(r))
                .unwrap();
            let mut times: Vec<f64> = vec![0.0];
            times.extend(b.lam.jumps.iter().map(|&(t, _)| t));
            times.extend(b.lower.jumps.iter().map(|&(t, _)| t));
            times.extend(b.upper.jumps.iter().map(|&(t, _)| t));
            for &t in &times {
                let (lo, mid, hi) = (b.lower.state_at(t), b.lam.state_at(t), b.upper.state_at(t));
                assert!(
                    lo <= mid && mid <= hi,
                    "order violated at t={t} in replica {r}"
                );
            }
        }
    }

    #[test]
    fn diffusion_path_interpolates() {
        let mut p = DiffusionPath::default();
        p.record(0.0, &[1.0]);
        p.record(2.0, &[3.0]);
        assert_eq!(p.value_at(0.0).unwrap()[0], 1.0);
        assert_eq!(p.value_at(1.0).unwrap()[0], 2.0);
        assert_eq!(p.value_at(5.0).unwrap()[0], 3.0);
    }
}
