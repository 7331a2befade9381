//! Monte Carlo estimators over replica ensembles, and the exact
//! generator-based oracle for the disagreement functional
//! `Θ(t) = (1/t)∫₀ᵗ P(Λ_s ≠ Λ̃_s) ds`.
//!
//! Per-replica functionals of piecewise-constant paths are computed by exact
//! interval sweeps (no time grid anywhere), so estimates carry no
//! discretization bias knob. Aggregation uses compensated summation in
//! replica-index order: permuting worker completion order changes nothing.

use thiserror::Error;

use crate::ratemat::{
    coupling_generator, is_disagreement_state, transition_semigroup, RateMatError, RateMatrix,
    UniformizedRow,
};
use crate::sim::{ChainPath, ComparisonBundle, PerturbationPair};

/// Product-space size cap for the exact oracle (N² states get uniformized).
pub const EXACT_THETA_MAX_STATES: usize = 60;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("need at least 2 replicas, got {0}")]
    TooFewReplicas(usize),
    #[error("replica horizon {horizon} shorter than requested t = {t}")]
    HorizonTooShort { horizon: f64, t: f64 },
    #[error("exact oracle supports up to {EXACT_THETA_MAX_STATES} states, got {0}")]
    TooLarge(usize),
    #[error("time must be positive, got {0}")]
    BadTime(f64),
    #[error("empty sample set")]
    EmptySamples,
    #[error(transparent)]
    RateMat(#[from] RateMatError),
}

/// Compensated (Kahan) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

fn kahan_mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut s = KahanSum::default();
    for &v in values {
        s.add(v);
    }
    let mean = s.value() / n;
    let mut v = KahanSum::default();
    for &x in values {
        let d = x - mean;
        v.add(d * d);
    }
    let var = if values.len() > 1 {
        v.value() / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

/// Point estimate with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateWithCI {
    pub estimate: f64,
    pub std_error: f64,
    pub replicas: usize,
    /// CI half-width is `z · std_error`.
    pub z: f64,
    pub estimator: &'static str,
}

impl EstimateWithCI {
    pub fn half_width(&self) -> f64 {
        self.z * self.std_error
    }
}

/// Exact Lebesgue measure of `{s ≤ t : Λ_s ≠ Λ̃_s}` from two
/// piecewise-constant paths (merged jump sweep).
pub fn disagreement_time(a: &ChainPath, b: &ChainPath, t: f64) -> f64 {
    let mut acc = 0.0;
    let mut cur = 0.0;
    let (mut sa, mut sb) = (a.initial, b.initial);
    let (mut ia, mut ib) = (0usize, 0usize);
    loop {
        let ta = a.jumps.get(ia).map(|&(u, _)| u).unwrap_or(f64::INFINITY);
        let tb = b.jumps.get(ib).map(|&(u, _)| u).unwrap_or(f64::INFINITY);
        let u = ta.min(tb);
        if u > t {
            break;
        }
        if sa != sb {
            acc += u - cur;
        }
        cur = u;
        if ta == u {
            sa = a.jumps[ia].1;
            ia += 1;
        }
        if tb == u {
            sb = b.jumps[ib].1;
            ib += 1;
        }
    }
    if sa != sb {
        acc += t - cur;
    }
    acc
}

/// Monte Carlo estimate of `Θ(t)` over a perturbation-pair ensemble.
pub fn estimate_theta(
    pairs: &[PerturbationPair],
    t: f64,
) -> Result<EstimateWithCI, EstimatorError> {
    if pairs.is_empty() {
        return Err(EstimatorError::EmptyEnsemble);
    }
    if pairs.len() < 2 {
        return Err(EstimatorError::TooFewReplicas(pairs.len()));
    }
    if !(t > 0.0) {
        return Err(EstimatorError::BadTime(t));
    }
    for p in pairs {
        if p.base.horizon < t {
            return Err(EstimatorError::HorizonTooShort {
                horizon: p.base.horizon,
                t,
            });
        }
    }
    let values: Vec<f64> = pairs
        .iter()
        .map(|p| disagreement_time(&p.base, &p.perturbed, t) / t)
        .collect();
    let (mean, se) = kahan_mean_se(&values);
    Ok(EstimateWithCI {
        estimate: mean,
        std_error: se,
        replicas: pairs.len(),
        z: 3.0,
        estimator: "theta-mc",
    })
}

fn adaptive_simpson(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &mut impl FnMut(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            return left + right + err / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, b - a);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Exact `Θ(t)` for the block coupling of `(q, q̃)` started at `(i0, i0)`:
/// builds the product coupling generator, evaluates
/// `d(s) = 1 - Σ_i P_{(i0,i0),(i,i)}(s)` by uniformization with cached
/// vector powers, and integrates adaptively to an absolute tolerance of
/// 1e-8 on the time average.
pub fn exact_theta(
    q: &RateMatrix,
    qt: &RateMatrix,
    i0: usize,
    t: f64,
) -> Result<f64, EstimatorError> {
    let n = q.n_states();
    if n > EXACT_THETA_MAX_STATES {
        return Err(EstimatorError::TooLarge(n));
    }
    if !(t > 0.0) {
        return Err(EstimatorError::BadTime(t));
    }
    if crate::ratemat::l1_diff_norm(q, qt)? == 0.0 {
        // disagreement is unreachable from the diagonal
        return Ok(0.0);
    }
    let product = coupling_generator(q, qt)?;
    let src = i0 * n + i0;
    let mut unif = UniformizedRow::new(&product, src)?;
    let mut diag_mass: Vec<f64> = Vec::new();
    let mut d = |s: f64| -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        let agree = unif.functional_at(s, &mut diag_mass, |v| {
            v.iter()
                .enumerate()
                .filter(|(flat, _)| !is_disagreement_state(n, *flat))
                .map(|(_, x)| x)
                .sum()
        });
        (1.0 - agree).clamp(0.0, 1.0)
    };
    let integral = adaptive_simpson(&mut d, 0.0, t, 1e-8 * t);
    Ok(integral / t)
}

/// One detected order violation.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderViolation {
    pub replica: usize,
    pub time: f64,
    pub lower: usize,
    pub lam: usize,
    pub upper: usize,
}

#[derive(Debug, Clone, Default)]
pub struct OrderViolationReport {
    pub checked_events: usize,
    pub violations: usize,
    pub first: Option<OrderViolation>,
}

/// Scans every event time of every bundle for `Λ* ≤ Λ ≤ Λ̄`. The expected
/// count is exactly zero; any violation comes with its location.
pub fn order_violations(bundles: &[ComparisonBundle]) -> OrderViolationReport {
    let mut report = OrderViolationReport::default();
    for (r, b) in bundles.iter().enumerate() {
        let mut times: Vec<f64> = vec![0.0];
        times.extend(b.lam.jumps.iter().map(|&(t, _)| t));
        times.extend(b.lower.jumps.iter().map(|&(t, _)| t));
        times.extend(b.upper.jumps.iter().map(|&(t, _)| t));
        times.sort_by(|x, y| x.partial_cmp(y).unwrap());
        times.dedup();
        for &t in &times {
            report.checked_events += 1;
            let (lo, mid, hi) = (b.lower.state_at(t), b.lam.state_at(t), b.upper.state_at(t));
            if !(lo <= mid && mid <= hi) {
                report.violations += 1;
                if report.first.is_none() {
                    report.first = Some(OrderViolation {
                        replica: r,
                        time: t,
                        lower: lo,
                        lam: mid,
                        upper: hi,
                    });
                }
            }
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct RowCheck {
    /// 0-based start state of this replica group
    pub start: usize,
    pub replicas: usize,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct TransitionCheck {
    pub rows: Vec<RowCheck>,
    pub threshold: f64,
    pub pass: bool,
}

/// Compares state histograms at time `t` against the matching rows of
/// `exp(tQ)`, grouped by start state.
pub fn empirical_transition_check(
    paths: &[ChainPath],
    q: &RateMatrix,
    t: f64,
    threshold: f64,
) -> Result<TransitionCheck, EstimatorError> {
    if paths.is_empty() {
        return Err(EstimatorError::EmptyEnsemble);
    }
    let n = q.n_states();
    let sg = transition_semigroup(q, t)?;
    let mut groups: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for p in paths {
        let hist = groups.entry(p.initial).or_insert_with(|| vec![0.0; n]);
        hist[p.state_at(t)] += 1.0;
        *counts.entry(p.initial).or_insert(0) += 1;
    }
    let mut rows = Vec::new();
    let mut pass = true;
    for (start, hist) in groups {
        let m = counts[&start] as f64;
        let tv: f64 = (0..n)
            .map(|j| (hist[j] / m - sg[(start, j)]).abs())
            .sum();
        if tv > threshold {
            pass = false;
        }
        rows.push(RowCheck {
            start,
            replicas: m as usize,
            tv,
        });
    }
    Ok(TransitionCheck {
        rows,
        threshold,
        pass,
    })
}

#[derive(Debug, Clone)]
pub struct MomentPoint {
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct MomentCurve {
    pub p_prime: f64,
    pub points: Vec<MomentPoint>,
    pub divergent_fraction: f64,
    /// false when more than 1% of replicas diverged
    pub reliable: bool,
}

/// Empirical decay curve of `Ê|X_t|^{p'}` across a bundle ensemble.
/// Divergent replicas are excluded from the averages and reported.
pub fn moment_decay(
    bundles: &[ComparisonBundle],
    p_prime: f64,
    t_grid: &[f64],
) -> Result<MomentCurve, EstimatorError> {
    if bundles.is_empty() {
        return Err(EstimatorError::EmptyEnsemble);
    }
    if !(p_prime > 0.0) {
        return Err(EstimatorError::BadTime(p_prime));
    }
    let divergent = bundles
        .iter()
        .filter(|b| b.diffusion.diverged.is_some())
        .count();
    let divergent_fraction = divergent as f64 / bundles.len() as f64;
    let mut points = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let values: Vec<f64> = bundles
            .iter()
            .filter(|b| b.diffusion.diverged.is_none())
            .filter_map(|b| b.diffusion.value_at(t))
            .map(|x| {
                let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                norm.powf(p_prime)
            })
            .collect();
        if values.is_empty() {
            return Err(EstimatorError::EmptyEnsemble);
        }
        let (mean, se) = kahan_mean_se(&values);
        points.push(MomentPoint {
            t,
            mean,
            std_error: se,
        });
    }
    Ok(MomentCurve {
        p_prime,
        points,
        divergent_fraction,
        reliable: divergent_fraction <= 0.01,
    })
}

/// Empirical 1-d `W₂` via sorted-sample pairing; unequal sample counts fall
/// back to quantile interpolation. Demo-grade estimator.
pub fn wasserstein1d_empirical(a: &[f64], b: &[f64]) -> Result<f64, EstimatorError> {
    if a.is_empty() || b.is_empty() {
        return Err(EstimatorError::EmptySamples);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let quantile = |s: &[f64], u: f64| -> f64 {
        let pos = (u * s.len() as f64 - 0.5).clamp(0.0, (s.len() - 1) as f64);
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        if k + 1 < s.len() {
            s[k] * (1.0 - frac) + s[k + 1] * frac
        } else {
            s[k]
        }
    };
    let mut acc = KahanSum::default();
    if sa.len() == sb.len() {
        for (x, y) in sa.iter().zip(&sb) {
            acc.add((x - y) * (x - y));
        }
        Ok((acc.value() / sa.len() as f64).sqrt())
    } else {
        let m = sa.len().max(sb.len());
        for k in 0..m {
            let u = (k as f64 + 0.5) / m as f64;
            let d = quantile(&sa, u) - quantile(&sb, u);
            acc.add(d * d);
        }
        Ok((acc.value() / m as f64).sqrt())
    }
}
