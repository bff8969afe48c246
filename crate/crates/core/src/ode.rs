//! Explicit RK4 with step-doubling error control.
//!
//! Used as the numeric flow for fields without a closed form and as the
//! independent reference that the closed-form flows are tested against.

use std::cell::RefCell;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub min_step: f64,
}

impl IntegratorConfig {
    /// Tight tolerances for validating closed forms.
    pub fn oracle() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_steps: 1_000_000,
            min_step: 1e-14,
        }
    }

    /// Tolerances for numeric flows inside a scheme.
    pub fn in_scheme() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            max_steps: 100_000,
            min_step: 1e-14,
        }
    }

    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::oracle()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::param("rel_tol", "must be positive"));
        }
        if !(self.abs_tol > 0.0) {
            return Err(Error::param("abs_tol", "must be positive"));
        }
        if self.max_steps < 1 {
            return Err(Error::param("max_steps", "must be at least 1"));
        }
        if !(self.min_step > 0.0) {
            return Err(Error::param("min_step", "must be positive"));
        }
        Ok(())
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::oracle()
    }
}

/// Systems up to this size use a stack workspace.
const SMALL_DIM: usize = 4;

thread_local! {
    static WORKSPACE: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Solves the autonomous ODE `ẏ = field(y)` from `x0` over a duration `s`
/// (negative `s` runs backward).
pub fn integrate<F>(mut field: F, x0: &[f64], s: f64, cfg: &IntegratorConfig) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let mut x = x0.to_vec();
    integrate_in_place(|y, out| field(y, out), &mut x, s, cfg)?;
    Ok(x)
}

/// In-place variant of [`integrate`]. Returns the number of attempted steps.
pub fn integrate_in_place<F>(mut field: F, x: &mut [f64], s: f64, cfg: &IntegratorConfig) -> Result<usize>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    integrate_time_dependent(|_, y, out| field(y, out), x, s, cfg)
}

/// Solves `ẏ = field(t, y)` on `[0, s]` in place. `t` is the signed elapsed
/// time. Returns the number of attempted steps.
pub fn integrate_time_dependent<F>(
    mut field: F,
    x: &mut [f64],
    s: f64,
    cfg: &IntegratorConfig,
) -> Result<usize>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !s.is_finite() {
        return Err(Error::param("s", format!("duration {s} is not finite")));
    }
    if s == 0.0 || x.is_empty() {
        return Ok(0);
    }
    let n = x.len();
    if n <= SMALL_DIM {
        let mut ws = [0.0; 8 * SMALL_DIM];
        return run(&mut field, x, s, cfg, &mut ws[..8 * n]);
    }
    let mut ws = WORKSPACE.with(|w| std::mem::take(&mut *w.borrow_mut()));
    ws.clear();
    ws.resize(8 * n, 0.0);
    let result = run(&mut field, x, s, cfg, &mut ws);
    WORKSPACE.with(|w| *w.borrow_mut() = ws);
    result
}

fn run<F>(field: &mut F, x: &mut [f64], s: f64, cfg: &IntegratorConfig, ws: &mut [f64]) -> Result<usize>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = x.len();
    let (k1, rest) = ws.split_at_mut(n);
    let (k_a, rest) = rest.split_at_mut(n);
    let (k_b, rest) = rest.split_at_mut(n);
    let (k_c, rest) = rest.split_at_mut(n);
    let (tmp, rest) = rest.split_at_mut(n);
    let (full, rest) = rest.split_at_mut(n);
    let (mid, rest) = rest.split_at_mut(n);
    let half = &mut rest[..n];

    let dir = s.signum();
    let total = s.abs();
    let mut t = 0.0;
    let mut h = total;
    let mut attempts = 0usize;

    while t < total {
        let last = h >= total - t;
        if last {
            h = total - t;
        }
        attempts += 1;
        if attempts > cfg.max_steps {
            return Err(Error::StepBudget {
                max_steps: cfg.max_steps,
                time: dir * t,
            });
        }
        let ts = dir * t;
        let hs = dir * h;
        let attempt = (|| -> Result<()> {
            field(ts, x, k1)?;
            rk4_from(field, ts, x, 0.5 * hs, k1, k_a, k_b, k_c, tmp, mid)?;
            // k_c keeps f(t, x) for the full step
            k_c.copy_from_slice(k1);
            field(ts + 0.5 * hs, mid, k1)?;
            rk4_from(field, ts + 0.5 * hs, mid, 0.5 * hs, k1, k_a, k_b, tmp, full, half)?;
            k1.copy_from_slice(k_c);
            rk4_from(field, ts, x, hs, k1, k_a, k_b, k_c, tmp, full)
        })();
        match attempt {
            Ok(()) => {}
            Err(e @ Error::Domain { .. }) => {
                if 0.5 * h >= cfg.min_step {
                    h *= 0.5;
                    continue;
                }
                return Err(Error::Integration {
                    time: ts,
                    source: Box::new(e),
                });
            }
            Err(e) => {
                return Err(Error::Integration {
                    time: ts,
                    source: Box::new(e),
                })
            }
        }

        let mut err: f64 = 0.0;
        for i in 0..n {
            let scale = cfg.abs_tol + cfg.rel_tol * x[i].abs().max(half[i].abs());
            let e = (half[i] - full[i]).abs() / (15.0 * scale);
            err = err.max(e);
        }
        if err.is_nan() || half.iter().any(|v| !v.is_finite()) {
            if 0.5 * h >= cfg.min_step {
                h *= 0.5;
                continue;
            }
            return Err(Error::Overflow {
                context: format!("ODE integration at t = {ts}"),
            });
        }
        if err <= 1.0 {
            for i in 0..n {
                x[i] = half[i] + (half[i] - full[i]) / 15.0;
            }
            t = if last { total } else { t + h };
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).min(5.0) };
            h *= grow;
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            if h < cfg.min_step {
                return Err(Error::Integration {
                    time: ts,
                    source: Box::new(Error::Unsupported(format!(
                        "step size fell below min_step {}",
                        cfg.min_step
                    ))),
                });
            }
        }
    }
    Ok(attempts)
}

/// Scalar version of [`integrate_time_dependent`] with the same step control.
pub fn integrate_scalar<F>(mut field: F, x: f64, s: f64, cfg: &IntegratorConfig) -> Result<f64>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if !s.is_finite() {
        return Err(Error::param("s", format!("duration {s} is not finite")));
    }
    if s == 0.0 {
        return Ok(x);
    }
    let dir = s.signum();
    let total = s.abs();
    let (mut t, mut h, mut y) = (0.0, total, x);
    let mut attempts = 0usize;
    while t < total {
        let last = h >= total - t;
        if last {
            h = total - t;
        }
        attempts += 1;
        if attempts > cfg.max_steps {
            return Err(Error::StepBudget {
                max_steps: cfg.max_steps,
                time: dir * t,
            });
        }
        let (ts, hs) = (dir * t, dir * h);
        let attempt = (|| -> Result<(f64, f64)> {
            let k1 = field(ts, y)?;
            let mid = rk4_scalar(&mut field, ts, y, 0.5 * hs, k1)?;
            let k1m = field(ts + 0.5 * hs, mid)?;
            let half = rk4_scalar(&mut field, ts + 0.5 * hs, mid, 0.5 * hs, k1m)?;
            let full = rk4_scalar(&mut field, ts, y, hs, k1)?;
            Ok((half, full))
        })();
        let (half, full) = match attempt {
            Ok(v) => v,
            Err(Error::Domain { .. }) if 0.5 * h >= cfg.min_step => {
                h *= 0.5;
                continue;
            }
            Err(e) => {
                return Err(Error::Integration {
                    time: ts,
                    source: Box::new(e),
                })
            }
        };
        let scale = cfg.abs_tol + cfg.rel_tol * y.abs().max(half.abs());
        let err = (half - full).abs() / (15.0 * scale);
        if !err.is_finite() || !half.is_finite() {
            if 0.5 * h >= cfg.min_step {
                h *= 0.5;
                continue;
            }
            return Err(Error::Overflow {
                context: format!("ODE integration at t = {ts}"),
            });
        }
        if err <= 1.0 {
            y = half + (half - full) / 15.0;
            t = if last { total } else { t + h };
            h *= if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).min(5.0) };
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            if h < cfg.min_step {
                return Err(Error::Integration {
                    time: ts,
                    source: Box::new(Error::Unsupported(format!(
                        "step size fell below min_step {}",
                        cfg.min_step
                    ))),
                });
            }
        }
    }
    Ok(y)
}

#[inline]
fn rk4_scalar<F>(field: &mut F, t: f64, y: f64, h: f64, k1: f64) -> Result<f64>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let k2 = field(t + 0.5 * h, y + 0.5 * h * k1)?;
    let k3 = field(t + 0.5 * h, y + 0.5 * h * k2)?;
    let k4 = field(t + h, y + h * k3)?;
    Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// One classical RK4 step of size `h` from `(t, x)` with `k1 = f(t, x)`
/// precomputed; writes the result to `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn rk4_from<F>(
    field: &mut F,
    t: f64,
    x: &[f64],
    h: f64,
    k1: &[f64],
    k2: &mut [f64],
    k3: &mut [f64],
    k4: &mut [f64],
    tmp: &mut [f64],
    out: &mut [f64],
) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = x.len();
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    field(t + 0.5 * h, tmp, k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    field(t + 0.5 * h, tmp, k3)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    field(t + h, tmp, k4)?;
    for i in 0..n {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

/// Fixed-step RK4 with `steps` equal steps, no error control.
pub fn rk4_fixed<F>(mut field: F, x0: &[f64], s: f64, steps: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut out = vec![0.0; n];
    let h = s / steps as f64;
    let mut f = |_t: f64, y: &[f64], o: &mut [f64]| field(y, o);
    for k in 0..steps {
        let t = k as f64 * h;
        f(t, &x, &mut k1)?;
        rk4_from(&mut f, t, &x, h, &k1, &mut k2, &mut k3, &mut k4, &mut tmp, &mut out)?;
        x.copy_from_slice(&out);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(y: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = -2.125 * y[0];
        Ok(())
    }

    #[test]
    fn linear_decay() {
        let y = integrate(linear, &[-0.08235], 1.0, &IntegratorConfig::oracle()).unwrap();
        let exact = -0.08235 * (-2.125_f64).exp();
        assert!((y[0] - exact).abs() < 1e-10, "{} vs {exact}", y[0]);
        assert!((exact + 0.0098353).abs() < 1e-7);
    }

    #[test]
    fn backward_integration() {
        let y = integrate(linear, &[1.0], -0.5, &IntegratorConfig::oracle()).unwrap();
        assert!((y[0] - (1.0625_f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn zero_field_is_identity() {
        let y = integrate(
            |_, out| {
                out.fill(0.0);
                Ok(())
            },
            &[0.3, -1.5],
            7.0,
            &IntegratorConfig::oracle(),
        )
        .unwrap();
        assert_eq!(y, vec![0.3, -1.5]);
    }

    #[test]
    fn fourth_order_convergence() {
        let exact = (-2.125_f64).exp();
        let e1 = (rk4_fixed(linear, &[1.0], 1.0, 8).unwrap()[0] - exact).abs();
        let e2 = (rk4_fixed(linear, &[1.0], 1.0, 16).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn deterministic() {
        let f = |y: &[f64], out: &mut [f64]| {
            out[0] = y[1].sin();
            out[1] = -y[0] * y[1];
            Ok(())
        };
        let a = integrate(f, &[0.2, 1.1], 0.7, &IntegratorConfig::in_scheme()).unwrap();
        let b = integrate(f, &[0.2, 1.1], 0.7, &IntegratorConfig::in_scheme()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn time_dependent_field() {
        // ẏ = 2t y → y = e^{t²}
        let mut x = [1.0];
        integrate_time_dependent(
            |t, y, out| {
                out[0] = 2.0 * t * y[0];
                Ok(())
            },
            &mut x,
            0.8,
            &IntegratorConfig::oracle(),
        )
        .unwrap();
        let exact = 0.64_f64.exp();
        assert!((x[0] - exact).abs() < 1e-9 * exact, "{} vs {exact}", x[0]);
    }

    #[test]
    fn scalar_matches_vector_path() {
        let cfg = IntegratorConfig::in_scheme();
        let mut v = [0.7];
        integrate_time_dependent(
            |t, y, out| {
                out[0] = -y[0].abs().sqrt() * (1.0 + t);
                Ok(())
            },
            &mut v,
            -0.4,
            &cfg,
        )
        .unwrap();
        let s = integrate_scalar(|t, y| Ok(-y.abs().sqrt() * (1.0 + t)), 0.7, -0.4, &cfg).unwrap();
        assert_eq!(v[0], s);
    }

    #[test]
    fn domain_errors_surface_with_time() {
        // ẏ = −1 leaves the domain y ≥ 0 at t = 0.5
        let err = integrate(
            |y, out| {
                if y[0] < 0.0 {
                    return Err(Error::domain("test", "negative"));
                }
                out[0] = -1.0;
                Ok(())
            },
            &[0.5],
            1.0,
            &IntegratorConfig::oracle(),
        )
        .unwrap_err();
        match err {
            Error::Integration { time, .. } => assert!((time - 0.5).abs() < 1e-6, "{time}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_budget() {
        let cfg = IntegratorConfig {
            max_steps: 2,
            ..IntegratorConfig::oracle()
        };
        let err = integrate(
            |y, out| {
                out[0] = y[0] * y[0];
                Ok(())
            },
            &[1.0],
            0.99,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StepBudget { .. }));
    }
}
