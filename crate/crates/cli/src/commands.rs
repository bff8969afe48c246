//! The three subcommands, each producing CSV rows plus a short text report.

use nvflow::models::Model;
use nvflow::pricing::{
    convergence_study, price, relative_error, timing_comparison, ConvergenceStudy, CsvRow,
    EstimatorConfig, PricingProblem,
};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Price,
    Converge,
    Bench,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub threads: usize,
    /// Leave `wall_seconds` blank so outputs compare byte for byte.
    pub omit_timing: bool,
}

pub struct Outcome {
    pub rows: Vec<CsvRow>,
    pub report: Vec<String>,
}

fn estimator(cfg: &RunConfig, opts: &RunOptions) -> EstimatorConfig {
    EstimatorConfig::new(cfg.m)
        .with_source(cfg.sequence)
        .with_threads(opts.threads)
        .with_fusion(cfg.fusion)
}

fn wall(opts: &RunOptions, s: f64) -> Option<f64> {
    (!opts.omit_timing).then_some(s)
}

pub fn run(cmd: Command, cfg: &RunConfig, model: &Model, opts: &RunOptions) -> nvflow::Result<Outcome> {
    let problem = PricingProblem::new(model, &cfg.payoff, cfg.horizon, &cfg.x0);
    let est = estimator(cfg, opts);
    let mut rows = Vec::new();
    let mut report = Vec::new();
    match cmd {
        Command::Price => {
            for &scheme in &cfg.schemes {
                for &k in &cfg.ks {
                    let r = price(&problem, scheme, k, &est)?;
                    let rel = cfg.reference.map(|v| relative_error(r.estimate, v));
                    report.push(format!(
                        "{} {} K={} M={}: {:.10} (std err {:.3e}){}",
                        cfg.name,
                        scheme,
                        k,
                        r.m,
                        r.estimate,
                        r.std_error,
                        rel.map(|e| format!(", rel err {e:.3e}")).unwrap_or_default()
                    ));
                    rows.push(CsvRow {
                        model: cfg.name.clone(),
                        scheme,
                        steps: k,
                        m: Some(r.m),
                        estimate: r.estimate,
                        reference: cfg.reference,
                        rel_error: rel,
                        slope: None,
                        wall_seconds: wall(opts, r.wall_seconds),
                        diagnostics: r.diagnostics,
                    });
                }
            }
        }
        Command::Converge => {
            let study = ConvergenceStudy {
                schemes: cfg.schemes.clone(),
                ks: cfg.ks.clone(),
                m: cfg.m,
                reference: cfg.reference,
            };
            let res = convergence_study(&problem, &study, &est)?;
            for row in &res.rows {
                let r = &row.report;
                rows.push(CsvRow {
                    model: cfg.name.clone(),
                    scheme: r.scheme,
                    steps: r.steps,
                    m: Some(r.m),
                    estimate: r.estimate,
                    reference: Some(res.reference),
                    rel_error: Some(row.rel_error),
                    slope: res.slope(r.scheme),
                    wall_seconds: wall(opts, r.wall_seconds),
                    diagnostics: r.diagnostics,
                });
            }
            for (scheme, slope) in &res.slopes {
                report.push(match slope {
                    Some(s) => format!("{} {scheme}: slope {s:.3}", cfg.name),
                    None => format!("{} {scheme}: slope degenerate", cfg.name),
                });
            }
        }
        Command::Bench => {
            let reference = cfg
                .reference
                .ok_or_else(|| nvflow::Error::InvalidParameter {
                    name: "reference".into(),
                    reason: "bench needs a reference value".into(),
                })?;
            let cells = cfg.timing_cells();
            let out = timing_comparison(&problem, reference, &cells, &cfg.timing.protocol, &est)?;
            for t in out {
                report.push(format!(
                    "{} {} K={}: M={} rel err {:.3e} ({:.3} s)",
                    cfg.name,
                    t.scheme,
                    t.steps,
                    t.m.map(|m| m.to_string()).unwrap_or_else(|| "not converged".into()),
                    t.rel_error,
                    t.wall_seconds
                ));
                rows.push(CsvRow {
                    model: cfg.name.clone(),
                    scheme: t.scheme,
                    steps: t.steps,
                    m: t.m,
                    estimate: t.estimate,
                    reference: Some(reference),
                    rel_error: Some(t.rel_error),
                    slope: None,
                    wall_seconds: wall(opts, t.wall_seconds),
                    diagnostics: t.diagnostics,
                });
            }
        }
    }
    Ok(Outcome { rows, report })
}
