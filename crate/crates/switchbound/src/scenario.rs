//! Scenario-driven batch runner: parse a TOML config, execute replicated
//! simulations and bound evaluations on a worker pool, and emit CSV
//! artifacts plus a plain-text report with PASS/FAIL lines.
//!
//! Runs are deterministic functions of `(config, seed)`: replicas are keyed
//! by replica index, results are reduced in index order, and no artifact
//! contains wall-clock data — the same seed reproduces byte-identical CSVs
//! at any worker count. The config grammar and every CSV column are
//! documented in `docs/formats.md`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::bounds::{
    invariant_perturbation_bound, mitrophanov_bound, stability_exponent, theta_bounds,
    BoundsError, StabilityOutcome,
};
use crate::clocks::StreamSpec;
use crate::estimators::{
    estimate_theta, exact_theta, moment_decay, order_violations, EstimatorError,
    EXACT_THETA_MAX_STATES,
};
use crate::layout::MarkWindow;
use crate::ratemat::{
    bounded_quadratic_family, envelope_matrices, invariant_measure, is_irreducible,
    l1_diff_norm, validate_dense, EnvelopePair, RateMatError, RateMatrix,
    StateDependentRateSpec,
};
use crate::sim::{
    comparison_mark_window, simulate_comparison_bundle, simulate_perturbation_pair, BundleParams,
    ComparisonBundle, DiffusionSpec, PerturbationPair, SimError,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Config unreadable or schema-invalid (exit code 2).
    #[error("config error: {0}")]
    Schema(String),
    /// Input data fails validation (exit code 2).
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    /// Execution failed (exit code 1).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Runtime(format!("io: {e}"))
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for ScenarioError {
            fn from(e: $t) -> Self {
                ScenarioError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(RateMatError, SimError, EstimatorError, BoundsError, crate::layout::LayoutError);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Comparison,
    Perturbation,
    Stability,
    BoundsSweep,
    Validate,
}

fn default_replicas() -> usize {
    1
}
fn default_regime() -> usize {
    1
}
fn default_p_max() -> f64 {
    1.0
}
fn default_eta_t_max() -> f64 {
    40.0
}
fn default_eta_dt() -> f64 {
    0.05
}

/// One scenario: what to build, how many replicas, where to write.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// stream-id component separating logical phases within one run
    #[serde(default)]
    pub scenario_code: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub horizon: f64,
    #[serde(default)]
    pub dt: f64,
    #[serde(default)]
    pub time_grid: Vec<f64>,
    /// 1-based initial regime
    #[serde(default = "default_regime")]
    pub initial_regime: usize,
    /// 0 = all cores
    #[serde(default)]
    pub workers: usize,
    pub rates: RatesConfig,
    #[serde(default)]
    pub rates_perturbed: Option<RatesConfig>,
    #[serde(default)]
    pub diffusion: Option<DiffusionConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    #[serde(default)]
    pub eta: Option<EtaConfig>,
    pub output: OutputConfig,
}

/// Constant table or the built-in parametric family
/// `q_ij(x) = base + scale·|i-j|·min(x², 1)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub states: Option<usize>,
    #[serde(default)]
    pub base: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// full rows including diagonals
    #[serde(default)]
    pub table: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// only "linear" is built in: dX = b_i X dt + s_i X dB
    pub kind: String,
    pub x0: f64,
    pub drift: Vec<f64>,
    pub volatility: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub beta: Vec<f64>,
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default)]
    pub decay_check: Option<DecayCheck>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayCheck {
    pub time: f64,
    pub ratio: f64,
}

/// Envelope-integration window for the invariant-measure bound.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaConfig {
    #[serde(default = "default_eta_t_max")]
    pub t_max: f64,
    #[serde(default = "default_eta_dt")]
    pub dt: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    #[serde(default)]
    pub dump_paths: bool,
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// every per-scenario assertion held
    pub passed: bool,
    pub report: String,
    pub report_path: PathBuf,
    pub csv_paths: Vec<PathBuf>,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Schema(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| ScenarioError::Schema(e.to_string()))
}

enum BuiltRates {
    Family(StateDependentRateSpec),
    Table(RateMatrix),
}

fn build_rates(cfg: &RatesConfig) -> Result<BuiltRates, ScenarioError> {
    match (&cfg.family, &cfg.table) {
        (Some(name), None) => {
            if name != "bounded-quadratic" {
                return Err(ScenarioError::Schema(format!(
                    "unknown rate family `{name}` (built-in: bounded-quadratic)"
                )));
            }
            let n = cfg.states.ok_or_else(|| {
                ScenarioError::Schema("rates.states is required with a family".into())
            })?;
            if n < 2 {
                return Err(ScenarioError::Schema("rates.states must be >= 2".into()));
            }
            let base = cfg.base.unwrap_or(1.0);
            let scale = cfg.scale.unwrap_or(1.0);
            if base < 0.0 || scale < 0.0 {
                return Err(ScenarioError::Schema(
                    "rates.base and rates.scale must be nonnegative".into(),
                ));
            }
            Ok(BuiltRates::Family(bounded_quadratic_family(n, base, scale)))
        }
        (None, Some(table)) => {
            let violations = validate_dense(table);
            if !violations.is_empty() {
                return Err(ScenarioError::Validation(violations));
            }
            Ok(BuiltRates::Table(RateMatrix::from_dense_rows(table).map_err(
                |e| ScenarioError::Validation(vec![e.to_string()]),
            )?))
        }
        _ => Err(ScenarioError::Schema(
            "rates needs exactly one of `family` or `table`".into(),
        )),
    }
}

fn build_diffusion(cfg: &DiffusionConfig) -> Result<DiffusionSpec, ScenarioError> {
    if cfg.kind != "linear" {
        return Err(ScenarioError::Schema(format!(
            "unknown diffusion kind `{}` (built-in: linear)",
            cfg.kind
        )));
    }
    if cfg.drift.len() != cfg.volatility.len() {
        return Err(ScenarioError::Schema(
            "diffusion.drift and diffusion.volatility must have equal length".into(),
        ));
    }
    Ok(DiffusionSpec::linear(cfg.drift.clone(), cfg.volatility.clone()))
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v}")
    }
}

fn fmt_matrix(label: &str, q: &RateMatrix) -> String {
    let n = q.n_states();
    let mut s = format!("{label} ({} states, bandwidth {}):\n", n, q.bandwidth());
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| fmt_f64(if i == j { q.diag(i) } else { q.rate(i, j) }))
            .collect();
        let _ = writeln!(s, "  [{}]", row.join(", "));
    }
    s
}

struct Report {
    text: String,
    passed: bool,
}

impl Report {
    fn new(title: &str) -> Self {
        Report {
            text: format!("{title}\n{}\n", "=".repeat(title.len())),
            passed: true,
        }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    fn kv(&mut self, key: &str, value: impl AsRef<str>) {
        let _ = writeln!(self.text, "{key}: {}", value.as_ref());
    }

    fn check(&mut self, name: &str, ok: bool, detail: impl AsRef<str>) {
        if !ok {
            self.passed = false;
        }
        let _ = writeln!(
            self.text,
            "[{}] {name}: {}",
            if ok { "PASS" } else { "FAIL" },
            detail.as_ref()
        );
    }
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> Result<PathBuf, ScenarioError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn run_pool<T: Send>(
    workers: usize,
    replicas: usize,
    f: impl Fn(u64) -> Result<T, SimError> + Sync,
) -> Result<Vec<T>, ScenarioError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let out: Result<Vec<T>, SimError> = pool.install(|| {
        (0..replicas as u64)
            .into_par_iter()
            .map(|r| f(r))
            .collect()
    });
    out.map_err(|e| ScenarioError::Runtime(e.to_string()))
}

/// Executes a scenario end to end. The returned outcome carries the report
/// and artifact paths; `passed == false` means a runtime assertion failed
/// (exit code 1 at the CLI), schema/validation problems surface as errors
/// (exit code 2).
pub fn run_scenario(path: &Path, overrides: &Overrides) -> Result<RunOutcome, ScenarioError> {
    let mut sc = load_scenario(path)?;
    if let Some(seed) = overrides.seed {
        sc.seed = seed;
    }
    if let Some(replicas) = overrides.replicas {
        sc.replicas = replicas;
    }
    if let Some(dir) = &overrides.out_dir {
        sc.output.dir = dir.display().to_string();
    }
    if let Some(w) = overrides.workers {
        sc.workers = w;
    }
    if sc.replicas < 1 {
        return Err(ScenarioError::Schema("replicas must be >= 1".into()));
    }
    match sc.kind {
        ScenarioKind::Validate => run_validate(&sc),
        ScenarioKind::Comparison => run_comparison(&sc),
        ScenarioKind::Perturbation => run_perturbation(&sc),
        ScenarioKind::BoundsSweep => run_bounds_sweep(&sc),
        ScenarioKind::Stability => run_stability(&sc),
    }
}

fn out_dir(sc: &Scenario) -> PathBuf {
    PathBuf::from(&sc.output.dir)
}

fn run_validate(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    // table violations surface through build_rates as ScenarioError::Validation
    let built = build_rates(&sc.rates)?;
    let mut rep = Report::new("validation report");
    match built {
        BuiltRates::Table(q) => {
            rep.kv("input", "constant rate table");
            rep.line(fmt_matrix("generator", &q));
            rep.kv("K0 (max jump intensity)", fmt_f64(q.k0()));
            rep.kv("bandwidth", q.bandwidth().to_string());
            rep.kv("irreducible", is_irreducible(&q).to_string());
            rep.check("structural invariants", q.validate().is_empty(), "no violations");
        }
        BuiltRates::Family(spec) => {
            let n = spec.space.finite().unwrap_or(0);
            rep.kv("input", "bounded-quadratic family");
            rep.kv("states", n.to_string());
            rep.kv("declared K0", fmt_f64(spec.k0));
            let violations = spec.validate(n);
            for v in &violations {
                rep.line(format!("  violation: {v}"));
            }
            if !violations.is_empty() {
                return Err(ScenarioError::Validation(violations));
            }
            rep.check("sampled-grid invariants", true, "no violations");
        }
    }
    let dir = out_dir(sc);
    let passed = rep.passed;
    let report_path = write_artifact(&dir, "report.txt", &rep.text)?;
    Ok(RunOutcome {
        passed,
        report: rep.text,
        report_path,
        csv_paths: vec![],
    })
}

fn comparison_inputs(
    sc: &Scenario,
) -> Result<(StateDependentRateSpec, EnvelopePair, MarkWindow), ScenarioError> {
    let spec = match build_rates(&sc.rates)? {
        BuiltRates::Family(spec) => spec,
        BuiltRates::Table(q) => StateDependentRateSpec::from_matrix(&q),
    };
    let env = envelope_matrices(&spec)?;
    let window = comparison_mark_window(&spec, &env)?;
    Ok((spec, env, window))
}

fn run_comparison(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    if !(sc.horizon > 0.0) || !(sc.dt > 0.0) {
        return Err(ScenarioError::Schema(
            "comparison scenarios need horizon > 0 and dt > 0".into(),
        ));
    }
    let dcfg = sc.diffusion.as_ref().ok_or_else(|| {
        ScenarioError::Schema("comparison scenarios need a [diffusion] section".into())
    })?;
    let (spec, env, window) = comparison_inputs(sc)?;
    let n = spec.space.finite().unwrap_or(0);
    if sc.initial_regime < 1 || sc.initial_regime > n {
        return Err(ScenarioError::Schema(format!(
            "initial_regime must be in 1..={n}"
        )));
    }
    let dspec = build_diffusion(dcfg)?;
    let params = BundleParams {
        x0: vec![dcfg.x0],
        i0: sc.initial_regime - 1,
        horizon: sc.horizon,
        dt: sc.dt,
        sample_times: sc.time_grid.clone(),
    };
    let seed = sc.seed;
    let code = sc.scenario_code;
    let bundles: Vec<ComparisonBundle> = run_pool(sc.workers, sc.replicas, |r| {
        simulate_comparison_bundle(&spec, &env, &dspec, &window, &params, &StreamSpec::new(seed, code, r))
    })?;

    let violations = order_violations(&bundles);
    let mut rep = Report::new("comparison scenario");
    rep.kv("seed", sc.seed.to_string());
    rep.kv("replicas", sc.replicas.to_string());
    rep.kv("horizon", fmt_f64(sc.horizon));
    rep.kv("dt (Euler-Maruyama step)", fmt_f64(sc.dt));
    rep.line(fmt_matrix("upper envelope q̄", &env.upper));
    rep.line(fmt_matrix("lower envelope q*", &env.lower));
    rep.kv("envelope provenance", format!("{:?}", env.provenance));
    if let MarkWindow::Symmetric { k_mark } = &window {
        rep.kv("mark window K_mark", fmt_f64(*k_mark));
    }
    match invariant_measure(&env.upper) {
        Ok(mu) => {
            let w: Vec<String> = mu.weights().iter().map(|&v| fmt_f64(v)).collect();
            rep.kv("invariant measure of q̄", format!("({})", w.join(", ")));
        }
        Err(e) => rep.kv("invariant measure of q̄", format!("unavailable: {e}")),
    }
    rep.kv(
        "order checks (event times scanned)",
        violations.checked_events.to_string(),
    );
    rep.check(
        "pathwise order Λ* ≤ Λ ≤ Λ̄",
        violations.violations == 0,
        format!("{} violations", violations.violations),
    );
    if let Some(first) = &violations.first {
        rep.line(format!(
            "  first violation: replica {}, t = {}, states ({}, {}, {})",
            first.replica,
            fmt_f64(first.time),
            first.lower + 1,
            first.lam + 1,
            first.upper + 1
        ));
    }
    let divergent = bundles
        .iter()
        .filter(|b| b.diffusion.diverged.is_some())
        .count();
    rep.kv("divergent replicas", divergent.to_string());

    let dir = out_dir(sc);
    let mut csvs = Vec::new();
    let mut vio_csv = String::from("replicas,checked_events,violations\n");
    let _ = writeln!(
        vio_csv,
        "{},{},{}",
        sc.replicas, violations.checked_events, violations.violations
    );
    csvs.push(write_artifact(&dir, "violations.csv", &vio_csv)?);

    if !sc.time_grid.is_empty() {
        let curve = moment_decay(&bundles, 2.0, &sc.time_grid)?;
        let mut m_csv = String::from("t,moment,se,divergent_fraction\n");
        for p in &curve.points {
            let _ = writeln!(
                m_csv,
                "{},{},{},{}",
                fmt_f64(p.t),
                fmt_f64(p.mean),
                fmt_f64(p.std_error),
                fmt_f64(curve.divergent_fraction)
            );
        }
        csvs.push(write_artifact(&dir, "moments.csv", &m_csv)?);
        rep.kv("moment curve exponent p'", "2 (second moment)");
    }
    if sc.output.dump_paths {
        if let Some(b) = bundles.first() {
            let mut dump = String::from("t state_lambda state_star state_bar x\n");
            for (t, x) in b.diffusion.times.iter().zip(&b.diffusion.values) {
                let _ = writeln!(
                    dump,
                    "{:.6} {} {} {} {:.6}",
                    t,
                    b.lam.state_at(*t) + 1,
                    b.lower.state_at(*t) + 1,
                    b.upper.state_at(*t) + 1,
                    x[0]
                );
            }
            write_artifact(&dir, "path0.txt", &dump)?;
        }
    }
    let passed = rep.passed;
    let report_path = write_artifact(&dir, "report.txt", &rep.text)?;
    Ok(RunOutcome {
        passed,
        report: rep.text,
        report_path,
        csv_paths: csvs,
    })
}

fn constant_pair(sc: &Scenario) -> Result<(RateMatrix, RateMatrix), ScenarioError> {
    let q = match build_rates(&sc.rates)? {
        BuiltRates::Table(q) => q,
        BuiltRates::Family(_) => {
            return Err(ScenarioError::Schema(
                "this scenario kind needs constant rate tables".into(),
            ))
        }
    };
    let qt_cfg = sc.rates_perturbed.as_ref().ok_or_else(|| {
        ScenarioError::Schema("missing [rates_perturbed] section".into())
    })?;
    let qt = match build_rates(qt_cfg)? {
        BuiltRates::Table(q) => q,
        BuiltRates::Family(_) => {
            return Err(ScenarioError::Schema(
                "rates_perturbed needs a constant table".into(),
            ))
        }
    };
    if q.n_states() != qt.n_states() {
        return Err(ScenarioError::Schema(
            "rates and rates_perturbed must have equal state counts".into(),
        ));
    }
    Ok((q, qt))
}

fn shared_constants(q: &RateMatrix, qt: &RateMatrix) -> (usize, f64) {
    let c0 = q.max_positive_offset().max(qt.max_positive_offset()).max(1);
    let k0 = q.k0().max(qt.k0());
    (c0, k0)
}

fn run_perturbation(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    let (q, qt) = constant_pair(sc)?;
    if sc.time_grid.is_empty() {
        return Err(ScenarioError::Schema(
            "perturbation scenarios need a nonempty time_grid".into(),
        ));
    }
    let horizon = if sc.horizon > 0.0 {
        sc.horizon
    } else {
        sc.time_grid.iter().cloned().fold(0.0, f64::max)
    };
    let t_max = sc.time_grid.iter().cloned().fold(0.0, f64::max);
    if horizon < t_max {
        return Err(ScenarioError::Schema(
            "horizon must cover the largest time_grid entry".into(),
        ));
    }
    let n = q.n_states();
    let i0 = sc.initial_regime - 1;
    if i0 >= n {
        return Err(ScenarioError::Schema(format!(
            "initial_regime must be in 1..={n}"
        )));
    }
    let (c0, k0) = shared_constants(&q, &qt);
    let seed = sc.seed;
    let code = sc.scenario_code;
    let pairs: Vec<PerturbationPair> = run_pool(sc.workers, sc.replicas, |r| {
        simulate_perturbation_pair(&q, &qt, c0, k0, i0, horizon, &StreamSpec::new(seed, code, r))
    })?;

    let mut rep = Report::new("perturbation scenario");
    rep.kv("seed", sc.seed.to_string());
    rep.kv("replicas", sc.replicas.to_string());
    rep.line(fmt_matrix("generator Q", &q));
    rep.line(fmt_matrix("perturbed generator Q~", &qt));
    rep.kv("shared c0 (bandwidth)", c0.to_string());
    rep.kv("shared K0 (max jump intensity)", fmt_f64(k0));
    rep.kv(
        "delta = l1 norm of Q - Q~ (diagonals included)",
        fmt_f64(l1_diff_norm(&q, &qt)?),
    );

    let exact_ok = n <= EXACT_THETA_MAX_STATES;
    let mut csv = String::from("t,theta_hat,se,exact,lower_h3,upper_h2,upper_h25\n");
    for &t in &sc.time_grid {
        let est = estimate_theta(&pairs, t)?;
        let b = theta_bounds(&q, &qt, c0, k0, t)?;
        let exact = if exact_ok {
            Some(exact_theta(&q, &qt, i0, t)?)
        } else {
            None
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            fmt_f64(t),
            fmt_f64(est.estimate),
            fmt_f64(est.std_error),
            exact.map(fmt_f64).unwrap_or_else(|| "nan".into()),
            fmt_f64(b.lower_h3),
            fmt_f64(b.upper_h2),
            fmt_f64(b.upper_h25),
        );
        if let Some(ex) = exact {
            rep.check(
                &format!("theta sandwich at t = {}", fmt_f64(t)),
                b.lower_h3 <= ex && ex <= b.upper_h2 && ex <= b.upper_h25,
                format!(
                    "lower {} <= exact {} <= upper {} (cap {})",
                    fmt_f64(b.lower_h3),
                    fmt_f64(ex),
                    fmt_f64(b.upper_h2),
                    fmt_f64(b.upper_h25)
                ),
            );
            rep.check(
                &format!("MC vs exact oracle at t = {}", fmt_f64(t)),
                (est.estimate - ex).abs() <= 3.0 * est.std_error + 1e-12,
                format!(
                    "estimate {} (se {}) vs exact {}",
                    fmt_f64(est.estimate),
                    fmt_f64(est.std_error),
                    fmt_f64(ex)
                ),
            );
        } else {
            rep.kv(
                &format!("exact oracle at t = {}", fmt_f64(t)),
                format!("skipped (N = {n} exceeds {EXACT_THETA_MAX_STATES})"),
            );
        }
    }
    let dir = out_dir(sc);
    let csv_path = write_artifact(&dir, "theta.csv", &csv)?;
    let passed = rep.passed;
    let report_path = write_artifact(&dir, "report.txt", &rep.text)?;
    Ok(RunOutcome {
        passed,
        report: rep.text,
        report_path,
        csv_paths: vec![csv_path],
    })
}

fn run_bounds_sweep(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    let (q, qt) = constant_pair(sc)?;
    if sc.time_grid.is_empty() {
        return Err(ScenarioError::Schema(
            "bounds-sweep scenarios need a nonempty time_grid".into(),
        ));
    }
    let n = q.n_states();
    let i0 = sc.initial_regime - 1;
    if i0 >= n {
        return Err(ScenarioError::Schema(format!(
            "initial_regime must be in 1..={n}"
        )));
    }
    let (c0, k0) = shared_constants(&q, &qt);
    let exact_ok = n <= EXACT_THETA_MAX_STATES;

    let mut rep = Report::new("bounds sweep");
    rep.line(fmt_matrix("generator Q", &q));
    rep.line(fmt_matrix("perturbed generator Q~", &qt));
    rep.kv("shared c0 (bandwidth)", c0.to_string());
    rep.kv("shared K0 (max jump intensity)", fmt_f64(k0));

    let mut csv = String::from("t,delta,r,M,lower_h3,upper_h2,upper_h25,legacy_d8,exact\n");
    for &t in &sc.time_grid {
        let b = theta_bounds(&q, &qt, c0, k0, t)?;
        let exact = if exact_ok {
            Some(exact_theta(&q, &qt, i0, t)?)
        } else {
            None
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            fmt_f64(t),
            fmt_f64(b.delta),
            fmt_f64(b.inf_row_diff),
            fmt_f64(b.m_const),
            fmt_f64(b.lower_h3),
            fmt_f64(b.upper_h2),
            fmt_f64(b.upper_h25),
            fmt_f64(b.legacy_d8),
            exact.map(fmt_f64).unwrap_or_else(|| "nan".into()),
        );
        if let Some(ex) = exact {
            rep.check(
                &format!("theta sandwich at t = {}", fmt_f64(t)),
                b.lower_h3 <= ex && ex <= b.upper_h2 && ex <= b.upper_h25,
                format!(
                    "lower {} <= exact {} <= upper {}",
                    fmt_f64(b.lower_h3),
                    fmt_f64(ex),
                    fmt_f64(b.upper_h2)
                ),
            );
        }
    }

    // classical semigroup bound next to the exact semigroup distance
    let mit = mitrophanov_bound(&q, &qt)?;
    rep.kv(
        "tau1 (e^-1 crossing of beta)",
        mit.tau1.map(fmt_f64).unwrap_or_else(|| "inf".into()),
    );
    rep.kv("mitrophanov coefficient e*tau1/(e-1)", fmt_f64(mit.coefficient));
    rep.kv("mitrophanov bound", fmt_f64(mit.bound));
    if mit.bound.is_finite() {
        let mut dominated = true;
        let mut worst = 0.0f64;
        for &t in &sc.time_grid {
            let p = crate::ratemat::transition_semigroup(&q, t)?;
            let pt = crate::ratemat::transition_semigroup(&qt, t)?;
            let mut dist = 0.0f64;
            for i in 0..n {
                let row: f64 = (0..n).map(|j| (p[(i, j)] - pt[(i, j)]).abs()).sum();
                dist = dist.max(row);
            }
            worst = worst.max(dist);
            if dist > mit.bound + 1e-12 {
                dominated = false;
            }
        }
        rep.check(
            "semigroup distance dominated by mitrophanov bound",
            dominated,
            format!("max ‖P_t - P~_t‖ on grid = {}", fmt_f64(worst)),
        );
    }

    if is_irreducible(&q) && is_irreducible(&qt) {
        let eta = sc.eta.clone().unwrap_or(EtaConfig {
            t_max: default_eta_t_max(),
            dt: default_eta_dt(),
        });
        match invariant_perturbation_bound(&q, &qt, i0, eta.t_max, eta.dt) {
            Ok(ip) => {
                rep.kv("eta integral (with fitted tail)", fmt_f64(ip.eta_integral));
                rep.kv("eta tail rate", fmt_f64(ip.tail_rate));
                rep.kv("invariant perturbation bound", fmt_f64(ip.bound));
                rep.kv("measured ‖pi - pi~‖ (total variation)", fmt_f64(ip.measured));
                rep.check(
                    "invariant measure distance within bound",
                    ip.measured <= ip.bound + 1e-12,
                    format!("{} <= {}", fmt_f64(ip.measured), fmt_f64(ip.bound)),
                );
            }
            Err(e) => rep.kv("invariant perturbation bound", format!("unavailable: {e}")),
        }
    } else {
        rep.kv("invariant perturbation bound", "skipped (reducible input)");
    }

    let dir = out_dir(sc);
    let csv_path = write_artifact(&dir, "bounds.csv", &csv)?;
    let passed = rep.passed;
    let report_path = write_artifact(&dir, "report.txt", &rep.text)?;
    Ok(RunOutcome {
        passed,
        report: rep.text,
        report_path,
        csv_paths: vec![csv_path],
    })
}

fn run_stability(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    let st = sc.stability.as_ref().ok_or_else(|| {
        ScenarioError::Schema("stability scenarios need a [stability] section".into())
    })?;
    // the auxiliary generator: the upper envelope for a family, the table as-is
    let (q_bar, spec_env) = match build_rates(&sc.rates)? {
        BuiltRates::Family(spec) => {
            let env = envelope_matrices(&spec)?;
            (env.upper.clone(), Some((spec, env)))
        }
        BuiltRates::Table(q) => (q, None),
    };
    let mut rep = Report::new("stability scenario");
    rep.line(fmt_matrix("auxiliary generator q̄", &q_bar));
    let beta_s: Vec<String> = st.beta.iter().map(|&b| fmt_f64(b)).collect();
    rep.kv("beta", format!("({})", beta_s.join(", ")));

    let s = stability_exponent(&q_bar, &st.beta, st.p_max)?;
    let w: Vec<String> = s.mu.weights().iter().map(|&v| fmt_f64(v)).collect();
    rep.kv("invariant measure of q̄", format!("({})", w.join(", ")));
    rep.kv("sum of mu_i * beta_i", fmt_f64(s.mu_beta));
    let p_prime = match s.outcome {
        StabilityOutcome::ConditionViolated { mu_beta } => {
            rep.check(
                "average drift condition sum(mu*beta) < 0",
                false,
                format!("sum = {}", fmt_f64(mu_beta)),
            );
            let dir = out_dir(sc);
            let passed = rep.passed;
            let report_path = write_artifact(&dir, "report.txt", &rep.text)?;
            return Ok(RunOutcome {
                passed,
                report: rep.text,
                report_path,
                csv_paths: vec![],
            });
        }
        StabilityOutcome::Exponent { p_prime, abscissa } => {
            rep.check(
                "average drift condition sum(mu*beta) < 0",
                true,
                format!("sum = {}", fmt_f64(s.mu_beta)),
            );
            rep.kv("stability exponent p'", fmt_f64(p_prime));
            rep.kv("spectral abscissa at p'", fmt_f64(abscissa));
            rep.check("abscissa negative at p'", abscissa < 0.0, fmt_f64(abscissa));
            p_prime
        }
    };

    let mut csvs = Vec::new();
    if let (Some(dcfg), Some((spec, env))) = (&sc.diffusion, &spec_env) {
        if sc.replicas >= 2 && sc.horizon > 0.0 && sc.dt > 0.0 {
            let dspec = build_diffusion(dcfg)?;
            if let Some(ly) = &dspec.lyapunov {
                let matches = ly
                    .beta
                    .iter()
                    .zip(&st.beta)
                    .all(|(a, b)| (a - b).abs() < 1e-12);
                rep.check(
                    "diffusion beta matches configured beta (2b_i + s_i^2)",
                    matches,
                    format!(
                        "diffusion gives ({})",
                        ly.beta
                            .iter()
                            .map(|&b| fmt_f64(b))
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                );
            }
            let window = comparison_mark_window(spec, env)?;
            let mut grid = sc.time_grid.clone();
            if grid.is_empty() {
                grid = vec![0.0, sc.horizon];
            }
            let params = BundleParams {
                x0: vec![dcfg.x0],
                i0: sc.initial_regime - 1,
                horizon: sc.horizon,
                dt: sc.dt,
                sample_times: grid.clone(),
            };
            let seed = sc.seed;
            let code = sc.scenario_code;
            let bundles: Vec<ComparisonBundle> = run_pool(sc.workers, sc.replicas, |r| {
                simulate_comparison_bundle(
                    spec,
                    env,
                    &dspec,
                    &window,
                    &params,
                    &StreamSpec::new(seed, code, r),
                )
            })?;
            let curve = moment_decay(&bundles, p_prime, &grid)?;
            rep.kv(
                "divergent replica fraction",
                fmt_f64(curve.divergent_fraction),
            );
            rep.check(
                "divergent fraction within 1%",
                curve.reliable,
                fmt_f64(curve.divergent_fraction),
            );
            let mut m_csv = String::from("t,moment,se,divergent_fraction\n");
            for p in &curve.points {
                let _ = writeln!(
                    m_csv,
                    "{},{},{},{}",
                    fmt_f64(p.t),
                    fmt_f64(p.mean),
                    fmt_f64(p.std_error),
                    fmt_f64(curve.divergent_fraction)
                );
            }
            csvs.push(write_artifact(&out_dir(sc), "moments.csv", &m_csv)?);
            if let Some(chk) = &st.decay_check {
                let initial = curve
                    .points
                    .iter()
                    .find(|p| p.t == 0.0)
                    .map(|p| p.mean)
                    .unwrap_or(1.0);
                let fin = curve
                    .points
                    .iter()
                    .min_by(|a, b| {
                        (a.t - chk.time)
                            .abs()
                            .partial_cmp(&(b.t - chk.time).abs())
                            .unwrap()
                    })
                    .map(|p| p.mean)
                    .unwrap_or(f64::INFINITY);
                rep.check(
                    &format!(
                        "moment at t = {} below {} x initial",
                        fmt_f64(chk.time),
                        fmt_f64(chk.ratio)
                    ),
                    fin < chk.ratio * initial,
                    format!("E|X|^p' = {} vs initial {}", fmt_f64(fin), fmt_f64(initial)),
                );
            }
        }
    }

    let dir = out_dir(sc);
    let passed = rep.passed;
    let report_path = write_artifact(&dir, "report.txt", &rep.text)?;
    Ok(RunOutcome {
        passed,
        report: rep.text,
        report_path,
        csv_paths: csvs,
    })
}

/// Validates a scenario's inputs without running it (the `validate`
/// subcommand for any kind).
pub fn validate_only(path: &Path) -> Result<String, ScenarioError> {
    let sc = load_scenario(path)?;
    let mut lines = vec![format!("config {} parsed", path.display())];
    match build_rates(&sc.rates)? {
        BuiltRates::Table(q) => {
            lines.push(format!(
                "rates: {}-state table, K0 = {}, bandwidth {}",
                q.n_states(),
                fmt_f64(q.k0()),
                q.bandwidth()
            ));
        }
        BuiltRates::Family(spec) => {
            let n = spec.space.finite().unwrap_or(0);
            let violations = spec.validate(n);
            if !violations.is_empty() {
                return Err(ScenarioError::Validation(violations));
            }
            lines.push(format!(
                "rates: bounded-quadratic family on {n} states, K0 = {}",
                fmt_f64(spec.k0)
            ));
        }
    }
    if let Some(p) = &sc.rates_perturbed {
        build_rates(p)?;
        lines.push("rates_perturbed: ok".into());
    }
    if let Some(d) = &sc.diffusion {
        build_diffusion(d)?;
        lines.push("diffusion: ok".into());
    }
    lines.push("valid".into());
    Ok(lines.join("\n"))
}
