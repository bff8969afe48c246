//! Payoffs, the expectation estimator, convergence studies and the timing
//! protocol.
//!
//! Trajectories are processed in fixed-size chunks. Each chunk sums its
//! trajectories sequentially and chunk sums are combined by pairwise
//! reduction in chunk order, so estimates are bit-identical for any number of
//! worker threads.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, SabrKind, Sde};
use crate::qmc::{draw_trajectory_into, DimensionLayout, PointSource, PointStream, SobolSequence, TrajectoryDraw};
use crate::schemes::{SchemeKind, SimScratch, Simulator};
use crate::Diagnostics;

/// Estimated price of the SABR call (β = 0.9, a = 1, b = 0.4, ρ = −0.7,
/// x = (1, 0.3), T = 1, strike 1.05), obtained by extrapolation.
pub const SABR_REFERENCE: f64 = 0.09400046;
/// Generalized SABR call (β = 1, θ = 0.3, κ = 2, α = 0.5, a = 1, b = 0.5,
/// ρ = −0.7, x = (1, 0.2), T = 1, strike 1.05).
pub const GENSABR_REFERENCE: f64 = 0.1767505855;
/// Equal-weight basket call on the four-asset generalized SABR model.
pub const MULTISABR_REFERENCE: f64 = 0.09254183;

/// Trajectories per reduction chunk.
pub const DEFAULT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Payoff {
    /// `(S_T − K)_+` on the first asset.
    EuropeanCall { strike: f64 },
    /// `(Σ w_i S^i_T − K)_+`; equal weights when omitted.
    BasketCall {
        strike: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// The raw state coordinate `X_index(T)`.
    Coordinate { index: usize },
}

impl Payoff {
    pub fn validate<M: Sde + ?Sized>(&self, model: &M) -> Result<()> {
        match self {
            Payoff::EuropeanCall { strike } => check_strike(*strike),
            Payoff::BasketCall { strike, weights } => {
                check_strike(*strike)?;
                if let Some(w) = weights {
                    if w.len() != model.asset_count() {
                        return Err(Error::Dimension {
                            expected: model.asset_count(),
                            got: w.len(),
                            context: "basket weights".into(),
                        });
                    }
                    if w.iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::param("weights", "must be nonnegative"));
                    }
                    let total: f64 = w.iter().sum();
                    if (total - 1.0).abs() > 1e-12 {
                        return Err(Error::param("weights", format!("sum to {total}, not 1")));
                    }
                }
                Ok(())
            }
            Payoff::Coordinate { index } => {
                if *index >= model.state_dim() {
                    return Err(Error::param(
                        "index",
                        format!("coordinate {index} outside state of size {}", model.state_dim()),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn evaluate<M: Sde + ?Sized>(&self, model: &M, x: &[f64]) -> f64 {
        match self {
            Payoff::EuropeanCall { strike } => (model.asset_price(0, x) - strike).max(0.0),
            Payoff::BasketCall { strike, weights } => {
                let n = model.asset_count();
                let basket: f64 = match weights {
                    Some(w) => (0..n).map(|i| w[i] * model.asset_price(i, x)).sum(),
                    None => (0..n).map(|i| model.asset_price(i, x)).sum::<f64>() / n as f64,
                };
                (basket - strike).max(0.0)
            }
            Payoff::Coordinate { index } => x[*index],
        }
    }
}

fn check_strike(strike: f64) -> Result<()> {
    if !(strike >= 0.0 && strike.is_finite()) {
        return Err(Error::param("strike", format!("{strike} must be finite and nonnegative")));
    }
    Ok(())
}

/// How trajectories are generated and aggregated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub m: u64,
    pub source: PointSource,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    pub chunk: usize,
    pub fusion: bool,
}

impl EstimatorConfig {
    pub fn new(m: u64) -> Self {
        Self {
            m,
            source: PointSource::Sobol,
            threads: 0,
            chunk: DEFAULT_CHUNK,
            fusion: false,
        }
    }

    pub fn with_source(mut self, source: PointSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn with_fusion(mut self, fusion: bool) -> Self {
        self.fusion = fusion;
        self
    }
}

/// Running first and second moments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: u64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
        self.count += 1;
    }

    pub fn combine(&self, o: &Moments) -> Moments {
        Moments {
            sum: self.sum + o.sum,
            sum_sq: self.sum_sq + o.sum_sq,
            count: self.count + o.count,
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

struct ChunkStats {
    moments: Vec<Moments>,
    diag: Diagnostics,
}

fn pairwise(mut items: Vec<ChunkStats>) -> ChunkStats {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => {
                    let mut diag = a.diag;
                    diag.merge(&b.diag);
                    next.push(ChunkStats {
                        moments: a.moments.iter().zip(&b.moments).map(|(x, y)| x.combine(y)).collect(),
                        diag,
                    });
                }
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop().expect("at least one chunk")
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Unsupported(format!("cannot start worker pool: {e}")))
}

/// Simulates `cfg.m` trajectories and accumulates `n_obs` observables
/// computed by `observe(terminal, weight, out)`.
pub fn estimate_observables<M, F>(
    sim: &Simulator<'_, M>,
    x0: &[f64],
    cfg: &EstimatorConfig,
    n_obs: usize,
    observe: F,
) -> Result<(Vec<Moments>, Diagnostics)>
where
    M: Sde + ?Sized,
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    if cfg.m == 0 {
        return Err(Error::param("M", "at least one trajectory is required"));
    }
    if cfg.chunk == 0 {
        return Err(Error::param("chunk", "must be positive"));
    }
    let model = sim.model();
    model.check_state(x0)?;
    let layout = DimensionLayout::new(sim.kind(), sim.steps(), model.noise_dim())?;
    let sobol = match cfg.source {
        PointSource::Sobol => Some(SobolSequence::new(layout.dim)?),
        PointSource::Mc { .. } => None,
    };
    let chunk = cfg.chunk as u64;
    let n_chunks = cfg.m.div_ceil(chunk);

    let run_chunk = |c: u64| -> Result<ChunkStats> {
        let start = c * chunk;
        let end = (start + chunk).min(cfg.m);
        let mut stream = PointStream::new(cfg.source, sobol.as_ref(), start)?;
        let mut point = vec![0.0; layout.dim];
        let mut draw = TrajectoryDraw::for_layout(&layout);
        let mut x = vec![0.0; x0.len()];
        let mut scratch = SimScratch::default();
        let mut obs = vec![0.0; n_obs];
        let mut stats = ChunkStats {
            moments: vec![Moments::default(); n_obs],
            diag: Diagnostics::default(),
        };
        for index in start..end {
            stream.next_into(&mut point)?;
            draw_trajectory_into(&layout, &point, &mut draw)?;
            x.copy_from_slice(x0);
            let weight = sim
                .run_into(&mut x, &draw, &mut scratch, &mut stats.diag)
                .map_err(|e| Error::Trajectory {
                    index,
                    source: Box::new(e),
                })?;
            observe(&x, weight, &mut obs);
            for (m, &v) in stats.moments.iter_mut().zip(&obs) {
                m.push(v);
            }
        }
        Ok(stats)
    };

    let pool = thread_pool(cfg.threads)?;
    let chunks: Vec<ChunkStats> = pool.install(|| {
        (0..n_chunks)
            .into_par_iter()
            .map(run_chunk)
            .collect::<Result<Vec<_>>>()
    })?;
    let total = pairwise(chunks);
    Ok((total.moments, total.diag))
}

/// One priced configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub scheme: SchemeKind,
    pub steps: usize,
    pub m: u64,
    pub estimate: f64,
    pub std_error: f64,
    pub diagnostics: Diagnostics,
    pub wall_seconds: f64,
}

/// What to price: model, payoff, horizon and initial state.
#[derive(Debug, Clone, Copy)]
pub struct PricingProblem<'a, M: Sde + ?Sized> {
    pub model: &'a M,
    pub payoff: &'a Payoff,
    pub horizon: f64,
    pub x0: &'a [f64],
}

impl<'a, M: Sde + ?Sized> PricingProblem<'a, M> {
    pub fn new(model: &'a M, payoff: &'a Payoff, horizon: f64, x0: &'a [f64]) -> Self {
        Self {
            model,
            payoff,
            horizon,
            x0,
        }
    }

    fn simulator(&self, scheme: SchemeKind, steps: usize, cfg: &EstimatorConfig) -> Result<Simulator<'a, M>> {
        self.payoff.validate(self.model)?;
        Ok(Simulator::new(self.model, scheme, steps, self.horizon)?.fused(cfg.fusion))
    }
}

/// Mean of `weight · payoff(X_T)` over `cfg.m` trajectories.
pub fn price<M: Sde + ?Sized>(
    problem: &PricingProblem<'_, M>,
    scheme: SchemeKind,
    steps: usize,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let sim = problem.simulator(scheme, steps, cfg)?;
    let model = problem.model;
    let payoff = problem.payoff;
    let started = Instant::now();
    let (m, diag) = estimate_observables(&sim, problem.x0, cfg, 1, |x, w, out| {
        out[0] = w * payoff.evaluate(model, x);
    })?;
    Ok(EstimateReport {
        scheme,
        steps,
        m: cfg.m,
        estimate: m[0].mean(),
        std_error: m[0].std_error(),
        diagnostics: diag,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// `|estimate − reference| / |reference|`.
pub fn relative_error(estimate: f64, reference: f64) -> f64 {
    (estimate - reference).abs() / reference.abs()
}

/// Least-squares slope of `log₂ error` against `log₂ K`. `None` when fewer
/// than two points have a positive error.
pub fn fit_slope(ks: &[usize], errors: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > 0.0 && e.is_finite())
        .map(|(&k, &e)| ((k as f64).log2(), e.log2()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub schemes: Vec<SchemeKind>,
    pub ks: Vec<usize>,
    pub m: u64,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub report: EstimateReport,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceResult {
    pub reference: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Fitted slope per scheme, `None` when degenerate.
    pub slopes: Vec<(SchemeKind, Option<f64>)>,
}

impl ConvergenceResult {
    pub fn slope(&self, scheme: SchemeKind) -> Option<f64> {
        self.slopes.iter().find(|(s, _)| *s == scheme).and_then(|(_, v)| *v)
    }

    pub fn rows_for(&self, scheme: SchemeKind) -> impl Iterator<Item = &ConvergenceRow> {
        self.rows.iter().filter(move |r| r.report.scheme == scheme)
    }
}

impl ConvergenceStudy {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::param("schemes", "no scheme selected"));
        }
        if self.ks.is_empty() {
            return Err(Error::param("K", "the K grid is empty"));
        }
        if self.ks.iter().any(|&k| k == 0) {
            return Err(Error::param("K", "every K must be positive"));
        }
        if self.m == 0 {
            return Err(Error::param("M", "at least one trajectory is required"));
        }
        Ok(())
    }
}

/// Prices every (scheme, K) cell and fits the error slope per scheme.
pub fn convergence_study<M: Sde + ?Sized>(
    problem: &PricingProblem<'_, M>,
    study: &ConvergenceStudy,
    cfg: &EstimatorConfig,
) -> Result<ConvergenceResult> {
    study.validate()?;
    let reference = study
        .reference
        .ok_or_else(|| Error::param("reference", "a reference value is required"))?;
    let cfg = EstimatorConfig { m: study.m, ..*cfg };
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &scheme in &study.schemes {
        let mut errs = Vec::new();
        for &k in &study.ks {
            let report = price(problem, scheme, k, &cfg)?;
            let rel_error = relative_error(report.estimate, reference);
            errs.push(rel_error);
            rows.push(ConvergenceRow { report, rel_error });
        }
        // errors at rounding level carry no slope information
        let degenerate = errs.iter().all(|&e| e < 1e-13);
        slopes.push((scheme, if degenerate { None } else { fit_slope(&study.ks, &errs) }));
    }
    Ok(ConvergenceResult {
        reference,
        rows,
        slopes,
    })
}

/// Parameters of the run-time comparison: starting from `m0` trajectories,
/// `M` doubles until `consecutive` successive estimates have an absolute
/// error within `threshold` of the discretization error measured with
/// `reference_m` trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingProtocol {
    pub target_rel_error: f64,
    pub m0: u64,
    pub threshold: f64,
    pub consecutive: usize,
    pub m_cap: u64,
    pub reference_m: u64,
    pub repeats: usize,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self {
            target_rel_error: 1e-3,
            m0: 1000,
            threshold: 2e-5,
            consecutive: 2,
            m_cap: 1 << 24,
            reference_m: 1 << 22,
            repeats: 3,
        }
    }
}

impl TimingProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.m0 == 0 || self.m0 > self.m_cap {
            return Err(Error::param("m0", "must lie in 1..=m_cap"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::param("threshold", "must be positive"));
        }
        if self.consecutive == 0 || self.repeats == 0 || self.reference_m == 0 {
            return Err(Error::param("protocol", "counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub scheme: SchemeKind,
    pub steps: usize,
    /// Chosen trajectory count, `None` if the cap was reached first.
    pub m: Option<u64>,
    pub estimate: f64,
    pub rel_error: f64,
    /// Relative discretization error measured with `reference_m` trajectories.
    pub discretization_rel_error: f64,
    pub wall_seconds: f64,
    pub diagnostics: Diagnostics,
}

/// Median wall time of `repeats` runs after one discarded warm-up run.
pub fn timed_price<M: Sde + ?Sized>(
    problem: &PricingProblem<'_, M>,
    scheme: SchemeKind,
    steps: usize,
    cfg: &EstimatorConfig,
    repeats: usize,
) -> Result<EstimateReport> {
    let mut report = price(problem, scheme, steps, cfg)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let r = price(problem, scheme, steps, cfg)?;
        times.push(r.wall_seconds);
        report = r;
    }
    times.sort_by(f64::total_cmp);
    report.wall_seconds = times[times.len() / 2];
    Ok(report)
}

/// Smallest `M = m0 · 2^j` from which `consecutive` successive doublings stay
/// within the threshold of the discretization error.
pub fn choose_m<M: Sde + ?Sized>(
    problem: &PricingProblem<'_, M>,
    scheme: SchemeKind,
    steps: usize,
    reference: f64,
    discretization_error: f64,
    protocol: &TimingProtocol,
    cfg: &EstimatorConfig,
) -> Result<Option<u64>> {
    let mut m = protocol.m0;
    let mut run_start: Option<u64> = None;
    let mut run_len = 0;
    while m <= protocol.m_cap {
        let r = price(problem, scheme, steps, &EstimatorConfig { m, ..*cfg })?;
        let observed = (r.estimate - reference).abs();
        if (observed - discretization_error).abs() < protocol.threshold {
            run_start.get_or_insert(m);
            run_len += 1;
            if run_len >= protocol.consecutive {
                return Ok(run_start);
            }
        } else {
            run_start = None;
            run_len = 0;
        }
        m *= 2;
    }
    Ok(None)
}

/// Runs the protocol for each `(scheme, K)` cell.
pub fn timing_comparison<M: Sde + ?Sized>(
    problem: &PricingProblem<'_, M>,
    reference: f64,
    cells: &[(SchemeKind, usize)],
    protocol: &TimingProtocol,
    cfg: &EstimatorConfig,
) -> Result<Vec<TimingRow>> {
    protocol.validate()?;
    let mut rows = Vec::new();
    for &(scheme, steps) in cells {
        let long = price(problem, scheme, steps, &EstimatorConfig { m: protocol.reference_m, ..*cfg })?;
        let disc = (long.estimate - reference).abs();
        let chosen = choose_m(problem, scheme, steps, reference, disc, protocol, cfg)?;
        let m = chosen.unwrap_or(protocol.m_cap);
        let r = timed_price(problem, scheme, steps, &EstimatorConfig { m, ..*cfg }, protocol.repeats)?;
        rows.push(TimingRow {
            scheme,
            steps,
            m: chosen,
            estimate: r.estimate,
            rel_error: relative_error(r.estimate, reference),
            discretization_rel_error: relative_error(long.estimate, reference),
            wall_seconds: r.wall_seconds,
            diagnostics: r.diagnostics,
        });
    }
    Ok(rows)
}

/// Picks the power-of-two `K` from a convergence study whose relative error
/// is closest (in log scale) to the target.
pub fn select_k(result: &ConvergenceResult, scheme: SchemeKind, target: f64) -> Option<usize> {
    result
        .rows_for(scheme)
        .filter(|r| r.rel_error > 0.0)
        .min_by(|a, b| {
            let da = (a.rel_error / target).ln().abs();
            let db = (b.rel_error / target).ln().abs();
            da.total_cmp(&db)
        })
        .map(|r| r.report.steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFactorReport {
    pub estimate: f64,
    pub std_error: f64,
    pub target: f64,
    pub rel_deviation: f64,
}

/// Compares the estimated `E[X_2(T)]` of a one-asset SABR-family model with
/// its exact value `θ + (x_2 − θ) e^{−κT}`.
pub fn mean_factor_check(
    model: &Model,
    scheme: SchemeKind,
    steps: usize,
    horizon: f64,
    x0: &[f64],
    cfg: &EstimatorConfig,
) -> Result<MeanFactorReport> {
    let family = match model {
        Model::Sabr(f) if f.kind() != SabrKind::MultiSabr => f,
        _ => {
            return Err(Error::Unsupported(
                "mean-factor check needs a one-asset SABR-family model".into(),
            ))
        }
    };
    let a = &family.assets()[0];
    let target = a.theta + (x0[1] - a.theta) * (-a.kappa * horizon).exp();
    let target = if a.kappa == 0.0 { x0[1] } else { target };
    let payoff = Payoff::Coordinate { index: 1 };
    let r = price(&PricingProblem::new(model, &payoff, horizon, x0), scheme, steps, cfg)?;
    Ok(MeanFactorReport {
        estimate: r.estimate,
        std_error: r.std_error,
        target,
        rel_deviation: relative_error(r.estimate, target),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GirsanovWeightReport {
    pub mean: f64,
    pub std_error: f64,
    pub variance: f64,
    pub expected_variance: f64,
}

/// Sample mean and variance of the Girsanov density `E(T)`, with the
/// theoretical variance `e^{|γ|² T} − 1`.
pub fn girsanov_weight_check<M: Sde + ?Sized>(
    model: &M,
    steps: usize,
    horizon: f64,
    x0: &[f64],
    cfg: &EstimatorConfig,
) -> Result<GirsanovWeightReport> {
    let sim = Simulator::new(model, SchemeKind::NvGirsanov, steps, horizon)?.fused(cfg.fusion);
    let norm: f64 = sim.gamma().iter().map(|g| g * g).sum();
    let (m, _) = estimate_observables(&sim, x0, cfg, 1, |_, w, out| out[0] = w)?;
    Ok(GirsanovWeightReport {
        mean: m[0].mean(),
        std_error: m[0].std_error(),
        variance: m[0].variance(),
        expected_variance: (norm * horizon).exp_m1(),
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str =
    "model,scheme,K,M,estimate,ref,rel_error,slope,wall_seconds,oracle_calls,clamp_hits";

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub model: String,
    pub scheme: SchemeKind,
    pub steps: usize,
    pub m: Option<u64>,
    pub estimate: f64,
    pub reference: Option<f64>,
    pub rel_error: Option<f64>,
    pub slope: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub diagnostics: Diagnostics,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl CsvRow {
    pub fn render(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.scheme,
            self.steps,
            opt(self.m),
            self.estimate,
            opt(self.reference),
            opt(self.rel_error),
            opt(self.slope),
            opt(self.wall_seconds),
            self.diagnostics.oracle_calls,
            self.diagnostics.clamp_hits
        )
    }
}

pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.render());
        out.push('\n');
    }
    out
}
