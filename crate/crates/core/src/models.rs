//! Model catalog: Heston (plain and log chart), SABR, generalized SABR and its
//! multi-asset version, all expressed as Stratonovich vector fields
//! `V_0, V_1, ..., V_d` acting on a flat state vector.
//!
//! The [`Sde`] trait is the surface the schemes are written against. Catalog
//! models override the flow methods with closed forms; any other implementor
//! falls back to numerical integration through [`crate::ode`].

use serde::{Deserialize, Serialize};

use crate::drift::{self, CholeskyFactor, Matrix};
use crate::error::{Error, Result};
use crate::flows;
use crate::ode::{self, IntegratorConfig};
use crate::Diagnostics;

/// β values this close to ½ or 1 are snapped to the exact endpoint.
pub const BETA_SNAP: f64 = 1e-12;

/// A diffusion in Stratonovich form
/// `dX = V_0(X) dt + Σ_j V_j(X) ∘ dB^j`, with `j = 1..=d`.
///
/// Diffusion fields are addressed by zero-based index `j` in `0..d`, so
/// `diffusion(0, ..)` is `V_1`.
pub trait Sde: Sync {
    fn name(&self) -> &str;

    /// State dimension N.
    fn state_dim(&self) -> usize;

    /// Number of driving Brownian motions d.
    fn noise_dim(&self) -> usize;

    /// Stratonovich drift `V_0`.
    fn drift(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Diffusion field `V_{j+1}`.
    fn diffusion(&self, j: usize, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `(V_j · ∇) V_j`, the directional derivative of a diffusion field along
    /// itself. Only needed for the Itô drift.
    fn diffusion_self_derivative(&self, j: usize, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported(format!(
            "{}: no analytic derivative for V_{}",
            self.name(),
            j + 1
        )))
    }

    /// Itô drift `Ṽ_0 = V_0 + ½ Σ_j (V_j · ∇) V_j`.
    fn ito_drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.drift(x, out)?;
        let mut tmp = vec![0.0; self.state_dim()];
        for j in 0..self.noise_dim() {
            self.diffusion_self_derivative(j, x, &mut tmp)?;
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += 0.5 * t;
            }
        }
        Ok(())
    }

    /// `Σ_j V_j(x) z_j`.
    fn diffusion_sum(&self, x: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        let mut tmp = vec![0.0; self.state_dim()];
        for (j, &zj) in z.iter().enumerate() {
            self.diffusion(j, x, &mut tmp)?;
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += zj * t;
            }
        }
        Ok(())
    }

    /// The model's own drift shift γ, if it has one that makes `V_0^(γ)`
    /// solvable in closed form.
    fn structural_shift(&self) -> Option<&[f64]> {
        None
    }

    /// `V_0^(γ) = V_0 − Σ_j γ_j V_j`.
    fn shifted_drift(&self, gamma: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        self.drift(x, out)?;
        let mut tmp = vec![0.0; self.state_dim()];
        for (j, &g) in gamma.iter().enumerate() {
            if g != 0.0 {
                self.diffusion(j, x, &mut tmp)?;
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o -= g * t;
                }
            }
        }
        Ok(())
    }

    /// `x ← e^{s V_0} x`.
    fn drift_flow(&self, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        diag.oracle_calls += 1;
        ode::integrate_in_place(|y, out| self.drift(y, out), x, s, &IntegratorConfig::in_scheme())
            .map(|_| ())
    }

    /// `x ← e^{s V_0^(γ)} x`.
    fn shifted_drift_flow(
        &self,
        gamma: &[f64],
        s: f64,
        x: &mut [f64],
        diag: &mut Diagnostics,
    ) -> Result<()> {
        if gamma.iter().all(|&g| g == 0.0) {
            return self.drift_flow(s, x, diag);
        }
        diag.oracle_calls += 1;
        ode::integrate_in_place(
            |y, out| self.shifted_drift(gamma, y, out),
            x,
            s,
            &IntegratorConfig::in_scheme(),
        )
        .map(|_| ())
    }

    /// `x ← e^{s V_{j+1}} x`.
    fn diffusion_flow(&self, j: usize, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        diag.oracle_calls += 1;
        ode::integrate_in_place(
            |y, out| self.diffusion(j, y, out),
            x,
            s,
            &IntegratorConfig::in_scheme(),
        )
        .map(|_| ())
    }

    /// Full truncation: floor constrained coordinates at zero. Used by the
    /// Euler scheme before evaluating fields.
    fn truncate(&self, _x: &mut [f64]) {}

    fn asset_count(&self) -> usize {
        1
    }

    /// Price of asset `i` in state `x`.
    fn asset_price(&self, i: usize, x: &[f64]) -> f64 {
        x[i]
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: x.len(),
                context: format!("{} state", self.name()),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HestonChart {
    /// `(x_1, x_2)` = (price, variance).
    Plain,
    /// `(log x_1, x_2)`.
    #[default]
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonParams {
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
    #[serde(default)]
    pub chart: HestonChart,
}

impl HestonParams {
    /// Level of the variance component of the Stratonovich drift flow,
    /// `J = (κθ − ξ²/4) / κ`.
    pub fn j(&self) -> f64 {
        (self.kappa * self.theta - 0.25 * self.xi * self.xi) / self.kappa
    }

    pub fn validate(&self) -> Result<()> {
        finite("mu", self.mu)?;
        positive("kappa", self.kappa)?;
        nonnegative("theta", self.theta)?;
        positive("xi", self.xi)?;
        open_correlation("rho", self.rho)?;
        let j = self.j();
        if j < 0.0 {
            return Err(Error::param(
                "J",
                format!("(kappa*theta - xi^2/4)/kappa = {j} must be >= 0"),
            ));
        }
        Ok(())
    }
}

/// Classical SABR: `dX_1 = a X_2 X_1^β dB^1`, `dX_2 = b X_2 dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SabrParams {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub rho: f64,
}

impl SabrParams {
    pub fn as_generalized(&self) -> GenSabrParams {
        GenSabrParams {
            a: self.a,
            b: self.b,
            alpha: 1.0,
            beta: self.beta,
            kappa: 0.0,
            theta: 0.0,
            rho: self.rho,
        }
    }
}

/// Generalized SABR with a mean-reverting, shifted log-normal factor:
/// `dX_1 = a X_2^α X_1^β dB^1`, `dX_2 = κ(θ − X_2) dt + b X_2 dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSabrParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub theta: f64,
    pub rho: f64,
}

impl GenSabrParams {
    pub fn validate(&self) -> Result<()> {
        validate_asset("", self.a, self.b, self.alpha, self.beta, self.kappa, self.theta)?;
        open_correlation("rho", self.rho)
    }

    /// Same parameters with β snapped onto ½ or 1 when within [`BETA_SNAP`].
    pub fn snapped(&self) -> Self {
        Self {
            beta: snap_beta(self.beta),
            ..*self
        }
    }

    pub fn correlation(&self) -> Matrix {
        Matrix::from_rows(&[vec![1.0, self.rho], vec![self.rho, 1.0]])
    }
}

/// Multi-asset generalized SABR. `rho` is the 2N×2N correlation of
/// `(B̃_1..B̃_N, W̃_1..W̃_N)` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiSabrParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MultiSabrParams {
    pub fn asset_count(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 {
            return Err(Error::param("a", "at least one asset is required"));
        }
        for (name, v) in [
            ("b", &self.b),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("kappa", &self.kappa),
            ("theta", &self.theta),
        ] {
            if v.len() != n {
                return Err(Error::param(
                    name,
                    format!("expected {n} entries, got {}", v.len()),
                ));
            }
        }
        if self.rho.len() != 4 * n * n {
            return Err(Error::param(
                "rho",
                format!("expected {} entries (2N x 2N, row-major), got {}", 4 * n * n, self.rho.len()),
            ));
        }
        for i in 0..n {
            validate_asset(
                &format!("[{i}]"),
                self.a[i],
                self.b[i],
                self.alpha[i],
                self.beta[i],
                self.kappa[i],
                self.theta[i],
            )?;
        }
        self.correlation().validate_correlation("rho")
    }

    pub fn correlation(&self) -> Matrix {
        Matrix::new(2 * self.a.len(), self.rho.clone())
    }
}

/// Model identifier plus parameters, as loaded from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "lowercase")]
pub enum ModelParams {
    Heston(HestonParams),
    Sabr(SabrParams),
    GenSabr(GenSabrParams),
    MultiSabr(MultiSabrParams),
}

impl ModelParams {
    pub fn name(&self) -> &'static str {
        match self {
            ModelParams::Heston(_) => "heston",
            ModelParams::Sabr(_) => "sabr",
            ModelParams::GenSabr(_) => "gensabr",
            ModelParams::MultiSabr(_) => "multisabr",
        }
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} is not finite")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} must be > 0")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} must be >= 0")))
    }
}

fn open_correlation(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > -1.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} must lie strictly inside (-1, 1)")))
    }
}

fn validate_asset(
    suffix: &str,
    a: f64,
    b: f64,
    alpha: f64,
    beta: f64,
    kappa: f64,
    theta: f64,
) -> Result<()> {
    positive(&format!("a{suffix}"), a)?;
    positive(&format!("b{suffix}"), b)?;
    positive(&format!("alpha{suffix}"), alpha)?;
    nonnegative(&format!("kappa{suffix}"), kappa)?;
    nonnegative(&format!("theta{suffix}"), theta)?;
    let beta = snap_beta(beta);
    if !(0.5..=1.0).contains(&beta) {
        return Err(Error::param(
            &format!("beta{suffix}"),
            format!("{beta} must lie in [0.5, 1]"),
        ));
    }
    Ok(())
}

pub fn snap_beta(beta: f64) -> f64 {
    if (beta - 0.5).abs() <= BETA_SNAP {
        0.5
    } else if (beta - 1.0).abs() <= BETA_SNAP {
        1.0
    } else {
        beta
    }
}

// ---------------------------------------------------------------------------
// Heston
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Heston {
    pub params: HestonParams,
}

impl Heston {
    pub fn new(params: HestonParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn chart(&self) -> HestonChart {
        self.params.chart
    }

    fn sqrt_var(&self, x: &[f64]) -> Result<f64> {
        if x[1] >= 0.0 {
            Ok(x[1].sqrt())
        } else {
            Err(Error::domain(
                "heston",
                format!("variance coordinate {} is negative", x[1]),
            ))
        }
    }
}

impl Sde for Heston {
    fn name(&self) -> &str {
        match self.params.chart {
            HestonChart::Plain => "heston",
            HestonChart::Log => "heston-log",
        }
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        if x[1] < 0.0 {
            return Err(Error::domain("heston", format!("variance coordinate {} is negative", x[1])));
        }
        let lead = p.mu - 0.25 * p.xi * p.rho - 0.5 * x[1];
        out[0] = match p.chart {
            HestonChart::Plain => lead * x[0],
            HestonChart::Log => lead,
        };
        out[1] = p.kappa * (p.theta - x[1]) - 0.25 * p.xi * p.xi;
        Ok(())
    }

    fn diffusion(&self, j: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        let sv = self.sqrt_var(x)?;
        match j {
            0 => {
                out[0] = match p.chart {
                    HestonChart::Plain => sv * x[0],
                    HestonChart::Log => sv,
                };
                out[1] = p.xi * p.rho * sv;
            }
            1 => {
                out[0] = 0.0;
                out[1] = p.xi * (1.0 - p.rho * p.rho).sqrt() * sv;
            }
            _ => return Err(field_index_error(self.name(), j, 2)),
        }
        Ok(())
    }

    fn diffusion_self_derivative(&self, j: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        self.sqrt_var(x)?;
        match j {
            0 => {
                out[0] = match p.chart {
                    HestonChart::Plain => x[1] * x[0] + 0.5 * p.xi * p.rho * x[0],
                    HestonChart::Log => 0.5 * p.xi * p.rho,
                };
                out[1] = 0.5 * p.xi * p.xi * p.rho * p.rho;
            }
            1 => {
                out[0] = 0.0;
                out[1] = 0.5 * p.xi * p.xi * (1.0 - p.rho * p.rho);
            }
            _ => return Err(field_index_error(self.name(), j, 2)),
        }
        Ok(())
    }

    fn ito_drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        self.sqrt_var(x)?;
        out[0] = match p.chart {
            HestonChart::Plain => p.mu * x[0],
            HestonChart::Log => p.mu - 0.5 * x[1],
        };
        out[1] = p.kappa * (p.theta - x[1]);
        Ok(())
    }

    fn diffusion_sum(&self, x: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        let sv = self.sqrt_var(x)?;
        out[0] = match p.chart {
            HestonChart::Plain => sv * x[0] * z[0],
            HestonChart::Log => sv * z[0],
        };
        out[1] = p.xi * sv * (p.rho * z[0] + (1.0 - p.rho * p.rho).sqrt() * z[1]);
        Ok(())
    }

    fn drift_flow(&self, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        flows::heston_flow(&self.params, 0, s, x, diag)
    }

    fn diffusion_flow(&self, j: usize, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        flows::heston_flow(&self.params, j + 1, s, x, diag)
    }

    fn truncate(&self, x: &mut [f64]) {
        x[1] = x[1].max(0.0);
    }

    fn asset_price(&self, _i: usize, x: &[f64]) -> f64 {
        match self.params.chart {
            HestonChart::Plain => x[0],
            HestonChart::Log => x[0].exp(),
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: x.len(),
                context: "heston state".into(),
            });
        }
        self.sqrt_var(x).map(|_| ())
    }
}

fn field_index_error(model: &str, j: usize, d: usize) -> Error {
    Error::Domain {
        context: model.to_string(),
        detail: format!("diffusion field index {j} out of range 0..{d}"),
    }
}

// ---------------------------------------------------------------------------
// SABR family
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SabrKind {
    Sabr,
    GenSabr,
    MultiSabr,
}

/// Per-asset constants of the SABR family.
#[derive(Debug, Clone, PartialEq)]
pub struct SabrAsset {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub theta: f64,
    /// `Σ_k √ρ_{i,k}²` (equals ρ_{i,i} = 1).
    pub p: f64,
    /// `Σ_k √ρ_{N+i,k} √ρ_{i,k}`.
    pub q: f64,
    /// `Σ_k √ρ_{N+i,k}²` (equals ρ_{N+i,N+i} = 1).
    pub r: f64,
}

impl SabrAsset {
    pub fn kappa_theta(&self) -> f64 {
        self.kappa * self.theta
    }
}

/// Coefficients of one diffusion field on one asset: the field is
/// `(cx · y^α x^β, cy · y)` on the asset's `(x, y)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldCoef {
    pub cx: f64,
    pub cy: f64,
}

/// SABR, generalized SABR and the multi-asset model share one representation:
/// N assets with state `(x_1, y_1, ..., x_N, y_N)` driven by 2N independent
/// Brownian motions `(B_1..B_N, W_1..W_N)` through the Cholesky factor of the
/// correlation matrix. Field `k < N` is `V_{k+1}` (driven by `B_{k+1}`),
/// field `N + k` is `U_{k+1}` (driven by `W_{k+1}`).
#[derive(Debug, Clone)]
pub struct SabrFamily {
    kind: SabrKind,
    assets: Vec<SabrAsset>,
    chol: CholeskyFactor,
    /// `coefs[k][i]`: field k on asset i.
    coefs: Vec<Vec<FieldCoef>>,
    gamma: Vec<f64>,
}

impl SabrFamily {
    pub fn sabr(params: &SabrParams) -> Result<Self> {
        let mut f = Self::gensabr(&params.as_generalized())?;
        f.kind = SabrKind::Sabr;
        Ok(f)
    }

    pub fn gensabr(params: &GenSabrParams) -> Result<Self> {
        params.validate()?;
        let p = params.snapped();
        let multi = MultiSabrParams {
            a: vec![p.a],
            b: vec![p.b],
            alpha: vec![p.alpha],
            beta: vec![p.beta],
            kappa: vec![p.kappa],
            theta: vec![p.theta],
            rho: vec![1.0, p.rho, p.rho, 1.0],
        };
        let mut f = Self::multisabr(&multi)?;
        f.kind = SabrKind::GenSabr;
        Ok(f)
    }

    pub fn multisabr(params: &MultiSabrParams) -> Result<Self> {
        params.validate()?;
        let n = params.asset_count();
        let chol = drift::cholesky(&params.correlation())?;
        let l = chol.matrix();
        let assets: Vec<SabrAsset> = (0..n)
            .map(|i| {
                let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
                for k in 0..2 * n {
                    p += l.get(i, k) * l.get(i, k);
                    q += l.get(n + i, k) * l.get(i, k);
                    r += l.get(n + i, k) * l.get(n + i, k);
                }
                SabrAsset {
                    a: params.a[i],
                    b: params.b[i],
                    alpha: params.alpha[i],
                    beta: snap_beta(params.beta[i]),
                    kappa: params.kappa[i],
                    theta: params.theta[i],
                    p,
                    q,
                    r,
                }
            })
            .collect();
        let coefs = (0..2 * n)
            .map(|k| {
                assets
                    .iter()
                    .enumerate()
                    .map(|(i, a)| FieldCoef {
                        cx: a.a * l.get(i, k),
                        cy: a.b * l.get(n + i, k),
                    })
                    .collect()
            })
            .collect();
        let mut family = Self {
            kind: SabrKind::MultiSabr,
            assets,
            chol,
            coefs,
            gamma: Vec::new(),
        };
        family.gamma = drift::solve_family_shift(&family)?.gamma;
        Ok(family)
    }

    pub fn kind(&self) -> SabrKind {
        self.kind
    }

    pub fn assets(&self) -> &[SabrAsset] {
        &self.assets
    }

    pub fn cholesky(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn coef(&self, field: usize, asset: usize) -> FieldCoef {
        self.coefs[field][asset]
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    fn is_structural(&self, gamma: &[f64]) -> bool {
        gamma == self.gamma.as_slice()
    }

    /// Classical Stratonovich drift. The factors have a closed form, so only
    /// the price components go through the ODE oracle, each as a scalar
    /// non-autonomous equation driven by its factor path.
    ///
    /// The price equation `ẋ = −m y^{2α} x^{2β−1} − n y^α x^β` is integrated
    /// in the coordinate `w = x^{2(1−β)}` (or `ln x` when β = 1), where it reads
    /// `ẇ = −2(1−β)(m y^{2α} + n y^α √w)`. A price reaching zero stays there.
    fn classical_drift_flow(&self, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        diag.oracle_calls += 1;
        let cfg = IntegratorConfig::in_scheme();
        for (i, a) in self.assets.iter().enumerate() {
            let (x0, y0) = (x[2 * i], x[2 * i + 1]);
            asset_domain(i, a.beta, x0, y0)?;
            let c = a.kappa + 0.5 * a.b * a.b * a.r;
            let level = a.kappa_theta() / c;
            let m = 0.5 * a.p * a.a * a.a * a.beta;
            let n = 0.5 * a.q * a.alpha * a.a * a.b;
            let mut path = FactorPath::new(level, y0 - level, c, a.alpha);
            let mut factor = |t: f64| path.eval(t);
            if a.beta == 1.0 {
                // an absolute error in ln x is a relative error in x
                let cfg = IntegratorConfig {
                    abs_tol: cfg.rel_tol,
                    ..cfg
                };
                let v = ode::integrate_scalar(
                    |t, _| {
                        let ya = factor(t);
                        Ok(-(m * ya + n) * ya)
                    },
                    0.0,
                    s,
                    &cfg,
                )?;
                x[2 * i] = x0 * v.exp();
            } else if x0 > 0.0 || a.beta == 0.5 {
                let e = 2.0 * (1.0 - a.beta);
                let w = ode::integrate_scalar(
                    |t, w| {
                        let ya = factor(t);
                        Ok(-e * (m * ya + n * w.max(0.0).sqrt()) * ya)
                    },
                    flows::pow(x0, e),
                    s,
                    &cfg,
                )?;
                x[2 * i] = if w > 0.0 { flows::pow(w, 1.0 / e) } else { 0.0 };
            }
            x[2 * i + 1] = flows::sabr_factor_drift_flow(a, s, y0);
        }
        Ok(())
    }
}

/// `t ↦ (level + gap·e^{−ct})^α`, remembering the last four evaluations.
/// One step-doubling attempt visits five distinct times and the last one
/// starts the next attempt, so four slots leave no repeated work.
struct FactorPath {
    level: f64,
    gap: f64,
    c: f64,
    alpha: f64,
    cache: [(f64, f64); 4],
    slot: usize,
}

impl FactorPath {
    fn new(level: f64, gap: f64, c: f64, alpha: f64) -> Self {
        Self {
            level,
            gap,
            c,
            alpha,
            cache: [(f64::NAN, 0.0); 4],
            slot: 0,
        }
    }

    #[inline]
    fn eval(&mut self, t: f64) -> f64 {
        for &(ct, v) in &self.cache {
            if ct == t {
                return v;
            }
        }
        let v = flows::pow(self.level + self.gap * (-self.c * t).exp(), self.alpha);
        self.cache[self.slot] = (t, v);
        self.slot = (self.slot + 1) & 3;
        v
    }
}

#[inline]
pub(crate) fn asset_domain(i: usize, beta: f64, x: f64, y: f64) -> Result<()> {
    if y < 0.0 || (beta < 1.0 && x < 0.0) || x.is_nan() || y.is_nan() {
        return Err(Error::Domain {
            context: format!("asset {i}"),
            detail: format!("state (x, y) = ({x}, {y}) outside the domain"),
        });
    }
    Ok(())
}

impl Sde for SabrFamily {
    fn name(&self) -> &str {
        match self.kind {
            SabrKind::Sabr => "sabr",
            SabrKind::GenSabr => "gensabr",
            SabrKind::MultiSabr => "multisabr",
        }
    }

    fn state_dim(&self) -> usize {
        2 * self.assets.len()
    }

    fn noise_dim(&self) -> usize {
        2 * self.assets.len()
    }

    fn drift(&self, s: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, a) in self.assets.iter().enumerate() {
            let (x, y) = (s[2 * i], s[2 * i + 1]);
            asset_domain(i, a.beta, x, y)?;
            let ya = flows::pow(y, a.alpha);
            let xb = flows::pow(x, a.beta);
            let x2b1 = flows::pow(x, 2.0 * a.beta - 1.0);
            out[2 * i] = -0.5 * a.p * a.a * a.a * a.beta * ya * ya * x2b1
                - 0.5 * a.q * a.alpha * a.a * a.b * ya * xb;
            out[2 * i + 1] = a.kappa_theta() - (a.kappa + 0.5 * a.b * a.b * a.r) * y;
        }
        Ok(())
    }

    fn diffusion(&self, k: usize, s: &[f64], out: &mut [f64]) -> Result<()> {
        let coefs = self
            .coefs
            .get(k)
            .ok_or_else(|| field_index_error(self.name(), k, self.noise_dim()))?;
        for (i, (a, c)) in self.assets.iter().zip(coefs).enumerate() {
            let (x, y) = (s[2 * i], s[2 * i + 1]);
            asset_domain(i, a.beta, x, y)?;
            out[2 * i] = if c.cx == 0.0 {
                0.0
            } else {
                c.cx * flows::pow(y, a.alpha) * flows::pow(x, a.beta)
            };
            out[2 * i + 1] = c.cy * y;
        }
        Ok(())
    }

    fn diffusion_self_derivative(&self, k: usize, s: &[f64], out: &mut [f64]) -> Result<()> {
        let coefs = self
            .coefs
            .get(k)
            .ok_or_else(|| field_index_error(self.name(), k, self.noise_dim()))?;
        for (i, (a, c)) in self.assets.iter().zip(coefs).enumerate() {
            let (x, y) = (s[2 * i], s[2 * i + 1]);
            asset_domain(i, a.beta, x, y)?;
            let ya = flows::pow(y, a.alpha);
            out[2 * i] = c.cx * c.cx * a.beta * ya * ya * flows::pow(x, 2.0 * a.beta - 1.0)
                + c.cx * c.cy * a.alpha * ya * flows::pow(x, a.beta);
            out[2 * i + 1] = c.cy * c.cy * y;
        }
        Ok(())
    }

    fn ito_drift(&self, s: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, a) in self.assets.iter().enumerate() {
            asset_domain(i, a.beta, s[2 * i], s[2 * i + 1])?;
            out[2 * i] = 0.0;
            out[2 * i + 1] = a.kappa * (a.theta - s[2 * i + 1]);
        }
        Ok(())
    }

    fn diffusion_sum(&self, s: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.assets.len();
        let l = self.chol.matrix();
        for (i, a) in self.assets.iter().enumerate() {
            let (x, y) = (s[2 * i], s[2 * i + 1]);
            asset_domain(i, a.beta, x, y)?;
            let (mut zb, mut zw) = (0.0, 0.0);
            for (k, &zk) in z.iter().enumerate().take(n + i + 1) {
                zb += l.get(i, k) * zk;
                zw += l.get(n + i, k) * zk;
            }
            out[2 * i] = a.a * flows::pow(y, a.alpha) * flows::pow(x, a.beta) * zb;
            out[2 * i + 1] = a.b * y * zw;
        }
        Ok(())
    }

    fn structural_shift(&self) -> Option<&[f64]> {
        Some(&self.gamma)
    }

    fn shifted_drift(&self, gamma: &[f64], s: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.is_structural(gamma) {
            // generic V_0 − Σ γ_j V_j
            self.drift(s, out)?;
            let mut tmp = vec![0.0; s.len()];
            for (j, &g) in gamma.iter().enumerate() {
                if g != 0.0 {
                    self.diffusion(j, s, &mut tmp)?;
                    for (o, t) in out.iter_mut().zip(&tmp) {
                        *o -= g * t;
                    }
                }
            }
            return Ok(());
        }
        for (i, a) in self.assets.iter().enumerate() {
            let (x, y) = (s[2 * i], s[2 * i + 1]);
            asset_domain(i, a.beta, x, y)?;
            let ya = flows::pow(y, a.alpha);
            out[2 * i] = -0.5 * a.p * a.a * a.a * a.beta * ya * ya * flows::pow(x, 2.0 * a.beta - 1.0);
            out[2 * i + 1] = a.kappa_theta();
        }
        Ok(())
    }

    fn drift_flow(&self, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        self.classical_drift_flow(s, x, diag)
    }

    fn shifted_drift_flow(
        &self,
        gamma: &[f64],
        s: f64,
        x: &mut [f64],
        diag: &mut Diagnostics,
    ) -> Result<()> {
        if self.is_structural(gamma) {
            flows::family_shifted_drift_flow(self, s, x, diag)
        } else if gamma.iter().all(|&g| g == 0.0) {
            self.classical_drift_flow(s, x, diag)
        } else {
            diag.oracle_calls += 1;
            ode::integrate_in_place(
                |y, out| self.shifted_drift(gamma, y, out),
                x,
                s,
                &IntegratorConfig::in_scheme(),
            )
            .map(|_| ())
        }
    }

    fn diffusion_flow(&self, k: usize, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        if k >= self.noise_dim() {
            return Err(field_index_error(self.name(), k, self.noise_dim()));
        }
        flows::family_diffusion_flow(self, k, s, x, diag)
    }

    fn truncate(&self, s: &mut [f64]) {
        for (i, a) in self.assets.iter().enumerate() {
            if a.beta < 1.0 {
                s[2 * i] = s[2 * i].max(0.0);
            }
            s[2 * i + 1] = s[2 * i + 1].max(0.0);
        }
    }

    fn asset_count(&self) -> usize {
        self.assets.len()
    }

    fn asset_price(&self, i: usize, x: &[f64]) -> f64 {
        x[2 * i]
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: s.len(),
                context: format!("{} state", self.name()),
            });
        }
        for (i, a) in self.assets.iter().enumerate() {
            asset_domain(i, a.beta, s[2 * i], s[2 * i + 1])?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// A validated catalog model. Immutable after construction.
#[derive(Debug, Clone)]
pub enum Model {
    Heston(Heston),
    Sabr(SabrFamily),
}

pub fn build_model(params: &ModelParams) -> Result<Model> {
    Ok(match params {
        ModelParams::Heston(p) => Model::Heston(Heston::new(*p)?),
        ModelParams::Sabr(p) => Model::Sabr(SabrFamily::sabr(p)?),
        ModelParams::GenSabr(p) => Model::Sabr(SabrFamily::gensabr(p)?),
        ModelParams::MultiSabr(p) => Model::Sabr(SabrFamily::multisabr(p)?),
    })
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::Heston($m) => $e,
            Model::Sabr($m) => $e,
        }
    };
}

impl Sde for Model {
    fn name(&self) -> &str {
        dispatch!(self, m => m.name())
    }
    fn state_dim(&self) -> usize {
        dispatch!(self, m => m.state_dim())
    }
    fn noise_dim(&self) -> usize {
        dispatch!(self, m => m.noise_dim())
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.drift(x, out))
    }
    fn diffusion(&self, j: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.diffusion(j, x, out))
    }
    fn diffusion_self_derivative(&self, j: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.diffusion_self_derivative(j, x, out))
    }
    fn ito_drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.ito_drift(x, out))
    }
    fn diffusion_sum(&self, x: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.diffusion_sum(x, z, out))
    }
    fn structural_shift(&self) -> Option<&[f64]> {
        dispatch!(self, m => m.structural_shift())
    }
    fn shifted_drift(&self, gamma: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.shifted_drift(gamma, x, out))
    }
    fn drift_flow(&self, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        dispatch!(self, m => m.drift_flow(s, x, diag))
    }
    fn shifted_drift_flow(
        &self,
        gamma: &[f64],
        s: f64,
        x: &mut [f64],
        diag: &mut Diagnostics,
    ) -> Result<()> {
        dispatch!(self, m => m.shifted_drift_flow(gamma, s, x, diag))
    }
    fn diffusion_flow(&self, j: usize, s: f64, x: &mut [f64], diag: &mut Diagnostics) -> Result<()> {
        dispatch!(self, m => m.diffusion_flow(j, s, x, diag))
    }
    fn truncate(&self, x: &mut [f64]) {
        dispatch!(self, m => m.truncate(x))
    }
    fn asset_count(&self) -> usize {
        dispatch!(self, m => m.asset_count())
    }
    fn asset_price(&self, i: usize, x: &[f64]) -> f64 {
        dispatch!(self, m => m.asset_price(i, x))
    }
    fn check_state(&self, x: &[f64]) -> Result<()> {
        dispatch!(self, m => m.check_state(x))
    }
}

/// Itô drift from a Stratonovich drift and diffusion fields, using the
/// model's analytic self-derivatives.
pub fn ito_drift_from_stratonovich<M: Sde + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.state_dim()];
    model.ito_drift(x, &mut out)?;
    Ok(out)
}

/// Evaluates field `j` at `x`: `j = 0` is the Stratonovich drift, `j ≥ 1` the
/// diffusion field `V_j`.
pub fn evaluate_field<M: Sde + ?Sized>(model: &M, j: usize, x: &[f64]) -> Result<Vec<f64>> {
    model.check_state(x)?;
    let mut out = vec![0.0; model.state_dim()];
    if j == 0 {
        model.drift(x, &mut out)?;
    } else if j <= model.noise_dim() {
        model.diffusion(j - 1, x, &mut out)?;
    } else {
        return Err(field_index_error(model.name(), j - 1, model.noise_dim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn heston(chart: HestonChart, rho: f64) -> Heston {
        Heston::new(HestonParams {
            mu: 0.0,
            kappa: 2.0,
            theta: 0.3,
            xi: 0.5,
            rho,
            chart,
        })
        .unwrap()
    }

    #[test]
    fn heston_j_level() {
        let h = heston(HestonChart::Plain, -0.7);
        assert_relative_eq!(h.params.j(), 0.26875, epsilon = 1e-15);
    }

    #[test]
    fn heston_rejects_negative_j_and_unit_correlation() {
        let mut p = heston(HestonChart::Log, 0.0).params;
        p.theta = 0.01;
        let err = Heston::new(p).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { ref name, .. } if name == "J"));
        let mut p = heston(HestonChart::Log, 0.0).params;
        p.rho = 1.0;
        assert!(Heston::new(p).is_err());
    }

    #[test]
    fn heston_v2_value() {
        let h = heston(HestonChart::Plain, 0.0);
        let v = evaluate_field(&h, 2, &[1.0, 0.04]).unwrap();
        assert_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 0.1, epsilon = 1e-15);
        let v = evaluate_field(&h, 2, &[1.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn heston_ito_drift_matches_printed_form() {
        for chart in [HestonChart::Plain, HestonChart::Log] {
            let h = heston(chart, -0.7);
            let x = [1.0, 0.09];
            let mut v0 = [0.0; 2];
            h.drift(&x, &mut v0).unwrap();
            let mut corr = [0.0; 2];
            let mut tmp = [0.0; 2];
            for j in 0..2 {
                h.diffusion_self_derivative(j, &x, &mut tmp).unwrap();
                corr[0] += 0.5 * tmp[0];
                corr[1] += 0.5 * tmp[1];
            }
            let ito = ito_drift_from_stratonovich(&h, &x).unwrap();
            assert_relative_eq!(ito[0], v0[0] + corr[0], epsilon = 1e-14);
            assert_relative_eq!(ito[1], 2.0 * (0.3 - 0.09), epsilon = 1e-14);
            assert_relative_eq!(ito[1], v0[1] + corr[1], epsilon = 1e-14);
        }
    }

    #[test]
    fn sabr_ito_drift_is_zero() {
        let m = SabrFamily::sabr(&SabrParams {
            a: 1.0,
            b: 0.4,
            beta: 0.9,
            rho: -0.7,
        })
        .unwrap();
        let ito = ito_drift_from_stratonovich(&m, &[1.0, 0.3]).unwrap();
        assert_eq!(ito, vec![0.0, 0.0]);
    }

    #[test]
    fn gensabr_v1_value() {
        let m = SabrFamily::gensabr(&GenSabrParams {
            a: 1.0,
            b: 0.5,
            alpha: 0.5,
            beta: 1.0,
            kappa: 2.0,
            theta: 0.3,
            rho: -0.7,
        })
        .unwrap();
        let v = evaluate_field(&m, 1, &[1.0, 0.2]).unwrap();
        assert_relative_eq!(v[0], 0.4472135954999579, epsilon = 1e-14);
        assert_relative_eq!(v[1], -0.07, epsilon = 1e-15);
    }

    #[test]
    fn beta_is_snapped_near_endpoints() {
        let p = GenSabrParams {
            a: 1.0,
            b: 0.5,
            alpha: 0.5,
            beta: 1.0 - 1e-13,
            kappa: 0.0,
            theta: 0.0,
            rho: 0.1,
        };
        let m = SabrFamily::gensabr(&p).unwrap();
        assert_eq!(m.assets()[0].beta, 1.0);
        assert_eq!(snap_beta(0.5 + 5e-13), 0.5);
        assert_eq!(snap_beta(0.7), 0.7);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let m = SabrFamily::sabr(&SabrParams {
            a: 1.0,
            b: 0.4,
            beta: 0.9,
            rho: -0.7,
        })
        .unwrap();
        assert!(matches!(
            evaluate_field(&m, 1, &[-0.1, 0.3]),
            Err(Error::Domain { .. })
        ));
        let h = heston(HestonChart::Log, 0.0);
        assert!(evaluate_field(&h, 1, &[0.0, -1e-3]).is_err());
    }

    #[test]
    fn multisabr_rejects_indefinite_rho() {
        let p = MultiSabrParams {
            a: vec![1.0],
            b: vec![0.5],
            alpha: vec![0.5],
            beta: vec![1.0],
            kappa: vec![1.0],
            theta: vec![0.2],
            rho: vec![1.0, 1.2, 1.2, 1.0],
        };
        let err = SabrFamily::multisabr(&p).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }), "{err}");
        let mut asym = p.clone();
        asym.rho = vec![1.0, 0.2, 0.3, 1.0];
        assert!(SabrFamily::multisabr(&asym).is_err());
    }

    #[test]
    fn model_params_json_shape() {
        let json = r#"{"name":"gensabr","params":{"a":1.0,"b":0.5,"alpha":0.5,"beta":1.0,"kappa":2.0,"theta":0.3,"rho":-0.7}}"#;
        let p: ModelParams = serde_json::from_str(json).unwrap();
        assert_eq!(p.name(), "gensabr");
        let back = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ModelParams>(&back).unwrap(), p);
    }
}
