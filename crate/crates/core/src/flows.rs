//! Closed-form solutions `e^{sV} x` of the autonomous ODEs `ẏ = V(y)` that the
//! splitting schemes compose.
//!
//! All formulas accept negative `s` (diffusion flows run for `Z √dt`, which
//! can have either sign). Positive-part clamps are applied where the formulas
//! carry them and counted in [`Diagnostics::clamp_hits`].

use crate::error::{Error, Result};
use crate::models::{
    asset_domain, GenSabrParams, HestonChart, HestonParams, Model, SabrAsset, SabrFamily,
    SabrParams, Sde,
};
use crate::ode::{self, IntegratorConfig};
use crate::Diagnostics;

/// Below this `|z|` the ratio `(e^z − 1)/z` switches to its Taylor series.
pub const EXPREL_SERIES_CUTOFF: f64 = 1e-8;

/// `x^e` with shortcuts for the exponents the catalog uses most.
#[inline]
pub(crate) fn pow(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else if e == 0.5 {
        x.sqrt()
    } else if e == 0.0 {
        1.0
    } else if e == 2.0 {
        x * x
    } else {
        x.powf(e)
    }
}

/// `(e^z − 1) / z`, continuous through `z = 0`.
#[inline]
pub fn exprel(z: f64) -> f64 {
    if z.abs() < EXPREL_SERIES_CUTOFF {
        1.0 + 0.5 * z * (1.0 + z / 3.0)
    } else {
        z.exp_m1() / z
    }
}

/// `((1+u)^n − 1) / (n u)`, continuous through `u = 0`.
#[inline]
fn powrel(n: f64, u: f64) -> f64 {
    if u.abs() < EXPREL_SERIES_CUTOFF {
        1.0 + 0.5 * (n - 1.0) * u
    } else {
        (n * u.ln_1p()).exp_m1() / (n * u)
    }
}

/// Input of the power ODE `y' = h(t) y^β`, `y(0) = x`, where `integral` is
/// `∫_0^t h(s) ds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOdeInput {
    pub beta: f64,
    pub x: f64,
    pub integral: f64,
}

/// `Φ_x(t) = ((1−β) ∫h + x^{1−β})_+^{1/(1−β)}`. At `x = 0` with positive `h`
/// this is the non-zero branch of the (non-unique) solution.
pub fn power_ode_flow(input: PowerOdeInput) -> Result<f64> {
    let PowerOdeInput { beta, x, integral } = input;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::param("beta", format!("{beta} must lie in (0, 1)")));
    }
    if !(x >= 0.0) {
        return Err(Error::domain("power ODE", format!("initial value {x} is negative")));
    }
    power_flow(beta, x, integral).map(|(v, _)| v)
}

/// Returns the value and whether the positive-part clamp was active.
#[inline]
pub(crate) fn power_flow(beta: f64, x: f64, integral: f64) -> Result<(f64, bool)> {
    let e = 1.0 - beta;
    let base = e * integral + x.powf(e);
    if base <= 0.0 {
        return Ok((0.0, base < 0.0));
    }
    let v = base.powf(1.0 / e);
    if !v.is_finite() {
        return Err(Error::Overflow {
            context: format!("power flow with beta = {beta}"),
        });
    }
    Ok((v, false))
}

// ---------------------------------------------------------------------------
// Heston
// ---------------------------------------------------------------------------

/// Heston flows in place: `field` 0 is the Stratonovich drift, 1 and 2 the
/// diffusion fields. Works in either chart according to `params.chart`.
pub fn heston_flow(
    params: &HestonParams,
    field: usize,
    s: f64,
    x: &mut [f64],
    diag: &mut Diagnostics,
) -> Result<()> {
    let v = x[1];
    if !(v >= 0.0) {
        return Err(Error::domain("heston flow", format!("variance {v} is negative")));
    }
    let p = params;
    // increment of log x_1 (plain chart) or of y_1 (log chart)
    let log_incr = match field {
        0 => {
            let j = p.j();
            let em1 = (-p.kappa * s).exp_m1();
            x[1] = v + (v - j) * em1;
            (p.mu - 0.25 * p.xi * p.rho - 0.5 * j) * s + 0.5 * (v - j) / p.kappa * em1
        }
        1 => {
            let c = p.xi * p.rho;
            let sv = v.sqrt();
            let r = 0.5 * c * s + sv;
            if r >= 0.0 {
                x[1] = r * r;
                // ((c s/2 + √v)² − v) / c, expanded to stay finite as c → 0
                s * sv + 0.25 * c * s * s
            } else {
                diag.clamp_hits += 1;
                x[1] = 0.0;
                -v / c
            }
        }
        2 => {
            let r = 0.5 * p.xi * (1.0 - p.rho * p.rho).sqrt() * s + v.sqrt();
            if r < 0.0 {
                diag.clamp_hits += 1;
            }
            x[1] = r.max(0.0).powi(2);
            0.0
        }
        _ => {
            return Err(Error::domain(
                "heston flow",
                format!("field index {field} out of range 0..=2"),
            ))
        }
    };
    match p.chart {
        HestonChart::Plain => x[0] *= log_incr.exp(),
        HestonChart::Log => x[0] += log_incr,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SABR family, per asset
// ---------------------------------------------------------------------------

/// Flow of the field `(cx y^α x^β, cy y)` for time `s` on one asset pair.
#[inline]
pub fn asset_diffusion_flow(
    cx: f64,
    cy: f64,
    alpha: f64,
    beta: f64,
    s: f64,
    x: f64,
    y: f64,
) -> Result<(f64, f64, bool)> {
    let y_new = y * (cy * s).exp();
    if cx == 0.0 {
        return Ok((x, y_new, false));
    }
    let integral = cx * pow(y, alpha) * s * exprel(alpha * cy * s);
    if beta == 1.0 {
        Ok((x * integral.exp(), y_new, false))
    } else {
        let (v, clamped) = power_flow(beta, x, integral)?;
        Ok((v, y_new, clamped))
    }
}

/// `P(s) = ∫_0^s (κθ u + y)^{2α} du`, including the `κθ = 0` limit `s y^{2α}`.
#[inline]
pub fn p_integral(kappa_theta: f64, alpha: f64, y: f64, s: f64) -> f64 {
    let n = 2.0 * alpha + 1.0;
    if kappa_theta == 0.0 {
        return s * pow(y, 2.0 * alpha);
    }
    if y == 0.0 {
        return (kappa_theta * s).powf(n) / (n * kappa_theta);
    }
    // y^{2α+1} ((1+u)^{2α+1} − 1) / ((2α+1) κθ) with u = κθ s / y
    let u = kappa_theta * s / y;
    s * pow(y, 2.0 * alpha) * powrel(n, u)
}

/// Flow of the shifted drift `(−m y^{2α} x^{2β−1}, κθ)` with `m = p a² β / 2`.
#[inline]
pub fn asset_shifted_drift_flow(
    m: f64,
    kappa_theta: f64,
    alpha: f64,
    beta: f64,
    s: f64,
    x: f64,
    y: f64,
) -> Result<(f64, f64, bool)> {
    let p = p_integral(kappa_theta, alpha, y, s);
    let y_new = kappa_theta * s + y;
    if beta == 1.0 {
        return Ok((x * (-m * p).exp(), y_new, false));
    }
    if beta == 0.5 {
        // printed without a positive-part clamp
        return Ok((x - m * p, y_new, false));
    }
    let e = 2.0 * (1.0 - beta);
    let base = x.powf(e) - e * m * p;
    if base <= 0.0 {
        return Ok((0.0, y_new, base < 0.0));
    }
    Ok((base.powf(1.0 / e), y_new, false))
}

/// Closed-form factor component of the classical drift flow,
/// `(y − κθ/c) e^{−cs} + κθ/c` with `c = κ + b² r / 2`.
#[inline]
pub fn sabr_factor_drift_flow(asset: &SabrAsset, s: f64, y: f64) -> f64 {
    let c = asset.kappa + 0.5 * asset.b * asset.b * asset.r;
    let level = asset.kappa_theta() / c;
    y + (y - level) * (-c * s).exp_m1()
}

pub(crate) fn family_diffusion_flow(
    family: &SabrFamily,
    k: usize,
    s: f64,
    state: &mut [f64],
    diag: &mut Diagnostics,
) -> Result<()> {
    for (i, a) in family.assets().iter().enumerate() {
        let c = family.coef(k, i);
        if c.cx == 0.0 && c.cy == 0.0 {
            continue;
        }
        let (x, y) = (state[2 * i], state[2 * i + 1]);
        asset_domain(i, a.beta, x, y)?;
        let (xn, yn, clamped) = asset_diffusion_flow(c.cx, c.cy, a.alpha, a.beta, s, x, y)
            .map_err(|e| with_asset(e, i))?;
        if clamped {
            diag.clamp_hits += 1;
        }
        state[2 * i] = xn;
        state[2 * i + 1] = yn;
    }
    Ok(())
}

pub(crate) fn family_shifted_drift_flow(
    family: &SabrFamily,
    s: f64,
    state: &mut [f64],
    diag: &mut Diagnostics,
) -> Result<()> {
    for (i, a) in family.assets().iter().enumerate() {
        let (x, y) = (state[2 * i], state[2 * i + 1]);
        asset_domain(i, a.beta, x, y)?;
        let m = 0.5 * a.p * a.a * a.a * a.beta;
        let (xn, yn, clamped) =
            asset_shifted_drift_flow(m, a.kappa_theta(), a.alpha, a.beta, s, x, y)
                .map_err(|e| with_asset(e, i))?;
        if clamped {
            diag.clamp_hits += 1;
        }
        state[2 * i] = xn;
        state[2 * i + 1] = yn;
    }
    Ok(())
}

fn with_asset(e: Error, i: usize) -> Error {
    match e {
        Error::Domain { context, detail } => Error::Domain {
            context: format!("asset {i}: {context}"),
            detail,
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Public per-model entry points
// ---------------------------------------------------------------------------

/// Which vector field a flow follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowField {
    /// Classical Stratonovich drift `V_0`.
    Drift,
    /// Shifted drift `V_0^(γ)` for the model's own γ.
    ShiftedDrift,
    /// Diffusion field, zero-based (`Diffusion(0)` is `V_1`).
    Diffusion(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowForm {
    Closed,
    Numeric,
}

/// A catalog flow bound to a field.
#[derive(Debug, Clone, Copy)]
pub struct FlowHandle<'a> {
    pub model: &'a Model,
    pub field: FlowField,
}

impl<'a> FlowHandle<'a> {
    pub fn new(model: &'a Model, field: FlowField) -> Result<Self> {
        match field {
            FlowField::Diffusion(j) if j >= model.noise_dim() => Err(Error::Domain {
                context: model.name().to_string(),
                detail: format!("diffusion field index {j} out of range"),
            }),
            FlowField::ShiftedDrift if model.structural_shift().is_none() => Err(
                Error::Unsupported(format!("{} has no structural drift shift", model.name())),
            ),
            _ => Ok(Self { model, field }),
        }
    }

    pub fn form(&self) -> FlowForm {
        match (self.model, self.field) {
            (Model::Sabr(_), FlowField::Drift) => FlowForm::Numeric,
            _ => FlowForm::Closed,
        }
    }

    pub fn apply(&self, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        match self.field {
            FlowField::Drift => self.model.drift_flow(s, x, diag),
            FlowField::ShiftedDrift => {
                let gamma = self.model.structural_shift().unwrap_or(&[]);
                self.model.shifted_drift_flow(gamma, s, x, diag)
            }
            FlowField::Diffusion(j) => self.model.diffusion_flow(j, s, x, diag),
        }
    }

    /// Evaluates the vector field this flow follows.
    pub fn field_value(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self.field {
            FlowField::Drift => self.model.drift(x, out),
            FlowField::ShiftedDrift => {
                let gamma = self.model.structural_shift().unwrap_or(&[]);
                self.model.shifted_drift(gamma, x, out)
            }
            FlowField::Diffusion(j) => self.model.diffusion(j, x, out),
        }
    }

    /// All flows of a model: drift, shifted drift (when available) and every
    /// diffusion field.
    pub fn all(model: &'a Model) -> Vec<FlowHandle<'a>> {
        let mut v = vec![FlowHandle {
            model,
            field: FlowField::Drift,
        }];
        if model.structural_shift().is_some() {
            v.push(FlowHandle {
                model,
                field: FlowField::ShiftedDrift,
            });
        }
        v.extend((0..model.noise_dim()).map(|j| FlowHandle {
            model,
            field: FlowField::Diffusion(j),
        }));
        v
    }
}

/// Two-factor generalized SABR flows computed straight from the two-factor
/// formulas (correlation `ρ`, `√(1−ρ²)`), independent of the Cholesky-based
/// multi-asset path. The classical drift integrates its price component
/// numerically and uses the closed-form factor component.
pub fn gensabr_flows(params: &GenSabrParams, field: FlowField, s: f64, x: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    let p = params.snapped();
    let (x1, x2) = (x[0], x[1]);
    asset_domain(0, p.beta, x1, x2)?;
    let c = (1.0 - p.rho * p.rho).sqrt();
    Ok(match field {
        FlowField::Diffusion(0) => {
            let (g1, y, _) = asset_diffusion_flow(p.a, p.b * p.rho, p.alpha, p.beta, s, x1, x2)?;
            vec![g1, y]
        }
        FlowField::Diffusion(1) => vec![x1, x2 * (p.b * c * s).exp()],
        FlowField::Diffusion(j) => {
            return Err(Error::domain("gensabr flow", format!("field index {j} out of range 0..2")))
        }
        FlowField::ShiftedDrift => {
            let m = 0.5 * p.a * p.a * p.beta;
            let (g0, y, _) =
                asset_shifted_drift_flow(m, p.kappa * p.theta, p.alpha, p.beta, s, x1, x2)?;
            vec![g0, y]
        }
        FlowField::Drift => {
            let field = |z: &[f64], out: &mut [f64]| -> Result<()> {
                asset_domain(0, p.beta, z[0], z[1])?;
                let ya = z[1].powf(p.alpha);
                out[0] = -0.5 * p.a * p.a * p.beta * ya * ya * z[0].powf(2.0 * p.beta - 1.0)
                    - 0.5 * p.alpha * p.a * p.b * p.rho * ya * z[0].powf(p.beta);
                out[1] = p.kappa * p.theta - (p.kappa + 0.5 * p.b * p.b) * z[1];
                Ok(())
            };
            let mut out = ode::integrate(field, x, s, &IntegratorConfig::in_scheme())?;
            let cc = p.kappa + 0.5 * p.b * p.b;
            let level = p.kappa * p.theta / cc;
            out[1] = (x2 - level) * (-cc * s).exp() + level;
            out
        }
    })
}

/// Classical SABR flows: the generalized model with `α = 1`, `κ = 0`.
pub fn sabr_flows(params: &SabrParams, field: FlowField, s: f64, x: &[f64]) -> Result<Vec<f64>> {
    gensabr_flows(&params.as_generalized(), field, s, x)
}

/// Multi-asset flows through the Cholesky-based field coefficients.
pub fn multisabr_flows(
    model: &SabrFamily,
    field: FlowField,
    s: f64,
    state: &[f64],
) -> Result<Vec<f64>> {
    model.check_state(state)?;
    let mut out = state.to_vec();
    let mut diag = Diagnostics::default();
    match field {
        FlowField::Drift => model.drift_flow(s, &mut out, &mut diag)?,
        FlowField::ShiftedDrift => family_shifted_drift_flow(model, s, &mut out, &mut diag)?,
        FlowField::Diffusion(k) => model.diffusion_flow(k, s, &mut out, &mut diag)?,
    }
    Ok(out)
}
