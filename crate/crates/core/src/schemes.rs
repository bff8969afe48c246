//! Discretization schemes mapping a trajectory draw to a terminal state.
//!
//! One NV step with coin `Λ` is
//! `e^{dt/2 V_0} ∘ e^{√dt Z_1 V_1} ∘ … ∘ e^{√dt Z_d V_d} ∘ e^{dt/2 V_0}` read
//! right to left for `Λ = −1` (so `V_1` is applied last), with the diffusion
//! order reversed for `Λ = +1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Sde;
use crate::qmc::TrajectoryDraw;
use crate::Diagnostics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Euler–Maruyama on the Itô form with full truncation.
    #[serde(rename = "euler")]
    Euler,
    /// Classical Ninomiya–Victoir.
    #[serde(rename = "nv")]
    Nv,
    /// NV with the drift shift `V_0^(γ)` and shifted Gaussian increments.
    #[serde(rename = "nvd")]
    NvDrift,
    /// NV on `V_0^(γ)` with unshifted increments and a Girsanov weight.
    #[serde(rename = "nvg")]
    NvGirsanov,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::Euler,
        SchemeKind::Nv,
        SchemeKind::NvDrift,
        SchemeKind::NvGirsanov,
    ];

    /// Whether each step draws a ±1 coin.
    pub fn uses_coin(self) -> bool {
        !matches!(self, SchemeKind::Euler)
    }

    pub fn uses_shift(self) -> bool {
        matches!(self, SchemeKind::NvDrift | SchemeKind::NvGirsanov)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Euler => "euler",
            SchemeKind::Nv => "nv",
            SchemeKind::NvDrift => "nvd",
            SchemeKind::NvGirsanov => "nvg",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" | "em" => Ok(SchemeKind::Euler),
            "nv" => Ok(SchemeKind::Nv),
            "nvd" | "nv-drift" => Ok(SchemeKind::NvDrift),
            "nvg" | "girsanov" => Ok(SchemeKind::NvGirsanov),
            other => Err(Error::param(
                "scheme",
                format!("unknown scheme `{other}` (expected euler, nv, nvd or nvg)"),
            )),
        }
    }
}

/// Result of simulating one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOutput {
    pub terminal: Vec<f64>,
    /// Girsanov density for [`SchemeKind::NvGirsanov`], 1 otherwise.
    pub weight: f64,
    pub diagnostics: Diagnostics,
}

fn at_step(step: usize, flow: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let flow = flow.into();
    move |e| Error::Step {
        step,
        flow,
        source: Box::new(e),
    }
}

/// Reusable buffers for [`euler_step`].
#[derive(Debug, Clone, Default)]
pub struct EulerScratch {
    truncated: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    scaled: Vec<f64>,
}

/// `x ← x + Ṽ_0(x⁺) dt + √dt Σ_j V_j(x⁺) Z_j`, where `x⁺` floors the
/// constrained coordinates at zero.
pub fn euler_step<M: Sde + ?Sized>(
    model: &M,
    x: &mut [f64],
    dt: f64,
    z: &[f64],
    scratch: &mut EulerScratch,
) -> Result<()> {
    let n = x.len();
    scratch.truncated.clear();
    scratch.truncated.extend_from_slice(x);
    model.truncate(&mut scratch.truncated);
    scratch.drift.resize(n, 0.0);
    scratch.diffusion.resize(n, 0.0);
    scratch.scaled.clear();
    let sq = dt.sqrt();
    scratch.scaled.extend(z.iter().map(|&v| v * sq));
    model.ito_drift(&scratch.truncated, &mut scratch.drift)?;
    model.diffusion_sum(&scratch.truncated, &scratch.scaled, &mut scratch.diffusion)?;
    for i in 0..n {
        x[i] += scratch.drift[i] * dt + scratch.diffusion[i];
    }
    Ok(())
}

fn diffusion_order(d: usize, lambda: i8) -> impl Iterator<Item = usize> {
    let reverse = lambda < 0;
    (0..d).map(move |i| if reverse { d - 1 - i } else { i })
}

/// Diffusion part of an NV step: flows for `amount(j)` in coin order.
fn diffusion_sweep<M: Sde + ?Sized>(
    model: &M,
    x: &mut [f64],
    lambda: i8,
    mut amount: impl FnMut(usize) -> f64,
    diag: &mut Diagnostics,
) -> Result<()> {
    for j in diffusion_order(model.noise_dim(), lambda) {
        model
            .diffusion_flow(j, amount(j), x, diag)
            .map_err(|e| Error::Step {
                step: 0,
                flow: format!("V{}", j + 1),
                source: Box::new(e),
            })?;
    }
    Ok(())
}

/// One classical NV step in place.
pub fn nv_step<M: Sde + ?Sized>(
    model: &M,
    x: &mut [f64],
    dt: f64,
    z: &[f64],
    lambda: i8,
    diag: &mut Diagnostics,
) -> Result<()> {
    let sq = dt.sqrt();
    model.drift_flow(0.5 * dt, x, diag).map_err(at_step(0, "V0"))?;
    diffusion_sweep(model, x, lambda, |j| sq * z[j], diag)?;
    model.drift_flow(0.5 * dt, x, diag).map_err(at_step(0, "V0"))
}

/// One NV step with drift shift `gamma`: `V_0^(γ)` half-steps and diffusion
/// amounts `√dt Z_j + dt γ_j`.
pub fn nvd_step<M: Sde + ?Sized>(
    model: &M,
    gamma: &[f64],
    x: &mut [f64],
    dt: f64,
    z: &[f64],
    lambda: i8,
    diag: &mut Diagnostics,
) -> Result<()> {
    let sq = dt.sqrt();
    model
        .shifted_drift_flow(gamma, 0.5 * dt, x, diag)
        .map_err(at_step(0, "V0(gamma)"))?;
    diffusion_sweep(model, x, lambda, |j| sq * z[j] + dt * gamma[j], diag)?;
    model
        .shifted_drift_flow(gamma, 0.5 * dt, x, diag)
        .map_err(at_step(0, "V0(gamma)"))
}

/// One step of the Girsanov-weighted scheme: the shifted drift with
/// unshifted increments. The Brownian increments are added to `brownian`.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_step<M: Sde + ?Sized>(
    model: &M,
    gamma: &[f64],
    x: &mut [f64],
    dt: f64,
    z: &[f64],
    lambda: i8,
    brownian: &mut [f64],
    diag: &mut Diagnostics,
) -> Result<()> {
    let sq = dt.sqrt();
    for (b, &zj) in brownian.iter_mut().zip(z) {
        *b += sq * zj;
    }
    model
        .shifted_drift_flow(gamma, 0.5 * dt, x, diag)
        .map_err(at_step(0, "V0(gamma)"))?;
    diffusion_sweep(model, x, lambda, |j| sq * z[j], diag)?;
    model
        .shifted_drift_flow(gamma, 0.5 * dt, x, diag)
        .map_err(at_step(0, "V0(gamma)"))
}

/// `E(T) = exp(Σ γ_j B^j_T − ½ |γ|² T)`.
pub fn girsanov_weight(gamma: &[f64], brownian: &[f64], horizon: f64) -> f64 {
    let dot: f64 = gamma.iter().zip(brownian).map(|(g, b)| g * b).sum();
    let norm: f64 = gamma.iter().map(|g| g * g).sum();
    (dot - 0.5 * norm * horizon).exp()
}

/// A scheme bound to a model, step count and horizon.
pub struct Simulator<'m, M: Sde + ?Sized> {
    model: &'m M,
    kind: SchemeKind,
    gamma: Vec<f64>,
    steps: usize,
    horizon: f64,
    fusion: bool,
}

/// Per-worker buffers for [`Simulator::run_into`].
#[derive(Debug, Clone, Default)]
pub struct SimScratch {
    euler: EulerScratch,
    brownian: Vec<f64>,
}

impl<'m, M: Sde + ?Sized> Simulator<'m, M> {
    /// Uses the model's structural drift shift for the shifted schemes, or
    /// γ = 0 when the model has none.
    pub fn new(model: &'m M, kind: SchemeKind, steps: usize, horizon: f64) -> Result<Self> {
        let gamma = model
            .structural_shift()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.noise_dim()]);
        Self::with_shift(model, kind, gamma, steps, horizon)
    }

    pub fn with_shift(
        model: &'m M,
        kind: SchemeKind,
        gamma: Vec<f64>,
        steps: usize,
        horizon: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("K", "at least one step is required"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("T", format!("horizon {horizon} must be positive")));
        }
        if gamma.len() != model.noise_dim() {
            return Err(Error::Dimension {
                expected: model.noise_dim(),
                got: gamma.len(),
                context: "drift shift".into(),
            });
        }
        Ok(Self {
            model,
            kind,
            gamma,
            steps,
            horizon,
            fusion: false,
        })
    }

    /// Merge the adjacent drift half-steps of consecutive NV steps into one
    /// flow of length `dt`.
    pub fn fused(mut self, fusion: bool) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn model(&self) -> &'m M {
        self.model
    }

    pub fn simulate(&self, x0: &[f64], draw: &TrajectoryDraw) -> Result<SchemeOutput> {
        let mut x = x0.to_vec();
        let mut diag = Diagnostics::default();
        let weight = self.run_into(&mut x, draw, &mut SimScratch::default(), &mut diag)?;
        Ok(SchemeOutput {
            terminal: x,
            weight,
            diagnostics: diag,
        })
    }

    /// Evolves `x` (holding `x_0`) to the terminal state and returns the weight.
    pub fn run_into(
        &self,
        x: &mut [f64],
        draw: &TrajectoryDraw,
        scratch: &mut SimScratch,
        diag: &mut Diagnostics,
    ) -> Result<f64> {
        let model = self.model;
        let d = model.noise_dim();
        let k_steps = self.steps;
        if x.len() != model.state_dim() {
            return Err(Error::Dimension {
                expected: model.state_dim(),
                got: x.len(),
                context: "initial state".into(),
            });
        }
        if draw.z.len() != k_steps * d
            || (self.kind.uses_coin() && draw.lambda.len() != k_steps)
        {
            return Err(Error::Dimension {
                expected: k_steps * d,
                got: draw.z.len(),
                context: format!("{} draw", self.kind),
            });
        }
        let dt = self.horizon / k_steps as f64;
        let sq = dt.sqrt();
        let gamma = &self.gamma;

        if self.kind == SchemeKind::Euler {
            for k in 0..k_steps {
                euler_step(model, x, dt, draw.step_increments(k, d), &mut scratch.euler)
                    .map_err(|e| relabel(e, k, "euler"))?;
            }
            return Ok(1.0);
        }

        let girsanov = self.kind == SchemeKind::NvGirsanov;
        if girsanov {
            scratch.brownian.clear();
            scratch.brownian.resize(d, 0.0);
        }
        let drift = |x: &mut [f64], s: f64, diag: &mut Diagnostics, k: usize| -> Result<()> {
            match self.kind {
                SchemeKind::Nv => model.drift_flow(s, x, diag).map_err(at_step(k, "V0")),
                _ => model
                    .shifted_drift_flow(gamma, s, x, diag)
                    .map_err(at_step(k, "V0(gamma)")),
            }
        };

        for k in 0..k_steps {
            let z = draw.step_increments(k, d);
            let lambda = draw.lambda[k];
            if !self.fusion || k == 0 {
                drift(x, 0.5 * dt, diag, k)?;
            }
            match self.kind {
                SchemeKind::NvDrift => {
                    diffusion_sweep(model, x, lambda, |j| sq * z[j] + dt * gamma[j], diag)
                }
                _ => diffusion_sweep(model, x, lambda, |j| sq * z[j], diag),
            }
            .map_err(|e| relabel(e, k, ""))?;
            if girsanov {
                for (b, &zj) in scratch.brownian.iter_mut().zip(z) {
                    *b += sq * zj;
                }
            }
            let s = if self.fusion && k + 1 < k_steps { dt } else { 0.5 * dt };
            drift(x, s, diag, k)?;
        }
        Ok(if girsanov {
            girsanov_weight(gamma, &scratch.brownian, self.horizon)
        } else {
            1.0
        })
    }
}

/// Sets the step index on an error raised inside a step.
fn relabel(e: Error, step: usize, default_flow: &str) -> Error {
    match e {
        Error::Step { flow, source, .. } => Error::Step { step, flow, source },
        other => Error::Step {
            step,
            flow: default_flow.to_string(),
            source: Box::new(other),
        },
    }
}

/// Convenience wrapper around [`Simulator`].
pub fn simulate_trajectory<M: Sde + ?Sized>(
    scheme: SchemeKind,
    model: &M,
    steps: usize,
    horizon: f64,
    x0: &[f64],
    draw: &TrajectoryDraw,
) -> Result<SchemeOutput> {
    Simulator::new(model, scheme, steps, horizon)?.simulate(x0, draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{HestonChart, HestonParams, Heston, SabrFamily, SabrParams};

    fn sabr() -> SabrFamily {
        SabrFamily::sabr(&SabrParams {
            a: 1.0,
            b: 0.4,
            beta: 0.9,
            rho: -0.7,
        })
        .unwrap()
    }

    fn heston() -> Heston {
        Heston::new(HestonParams {
            mu: 0.0,
            kappa: 2.0,
            theta: 0.3,
            xi: 0.5,
            rho: 0.0,
            chart: HestonChart::Log,
        })
        .unwrap()
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("rk".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn euler_zero_noise_on_sabr_is_identity() {
        let m = sabr();
        let mut x = [1.0, 0.3];
        euler_step(&m, &mut x, 0.25, &[0.0, 0.0], &mut EulerScratch::default()).unwrap();
        assert_eq!(x, [1.0, 0.3]);
    }

    #[test]
    fn euler_heston_log_chart_by_hand() {
        let m = heston();
        let mut x = [0.0, 0.04];
        euler_step(&m, &mut x, 0.25, &[1.0, 0.0], &mut EulerScratch::default()).unwrap();
        // Itô drift (−v/2, κ(θ − v)), V_1 = (√v, ξρ√v) = (0.2, 0)
        assert!((x[0] - (-0.02 * 0.25 + 0.5 * 0.2)).abs() < 1e-15);
        assert!((x[1] - (0.04 + 2.0 * 0.26 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn nv_zero_noise_matches_full_drift_flow() {
        let m = heston();
        let mut d = Diagnostics::default();
        let mut a = [0.1, 0.05];
        nv_step(&m, &mut a, 0.3, &[0.0, 0.0], -1, &mut d).unwrap();
        let mut b = [0.1, 0.05];
        m.drift_flow(0.3, &mut b, &mut d).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn shift_zero_nvd_equals_nv_bitwise() {
        let m = heston();
        let mut d = Diagnostics::default();
        let mut a = [0.1, 0.05];
        let mut b = a;
        nv_step(&m, &mut a, 0.3, &[0.4, -1.1], 1, &mut d).unwrap();
        nvd_step(&m, &[0.0, 0.0], &mut b, 0.3, &[0.4, -1.1], 1, &mut d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nvd_has_no_oracle_calls_and_nv_has_two_per_step() {
        let m = sabr();
        let draw = TrajectoryDraw {
            z: vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1],
            lambda: vec![-1, 1, 1],
        };
        let out = simulate_trajectory(SchemeKind::NvDrift, &m, 3, 1.0, &[1.0, 0.3], &draw).unwrap();
        assert_eq!(out.diagnostics.oracle_calls, 0);
        let out = simulate_trajectory(SchemeKind::Nv, &m, 3, 1.0, &[1.0, 0.3], &draw).unwrap();
        assert_eq!(out.diagnostics.oracle_calls, 6);
    }

    #[test]
    fn fusion_matches_unfused() {
        let m = sabr();
        let draw = TrajectoryDraw {
            z: vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1],
            lambda: vec![-1, 1, 1],
        };
        for kind in [SchemeKind::Nv, SchemeKind::NvDrift, SchemeKind::NvGirsanov] {
            let sim = Simulator::new(&m, kind, 3, 1.0).unwrap();
            let a = sim.simulate(&[1.0, 0.3], &draw).unwrap();
            let b = Simulator::new(&m, kind, 3, 1.0)
                .unwrap()
                .fused(true)
                .simulate(&[1.0, 0.3], &draw)
                .unwrap();
            for (u, v) in a.terminal.iter().zip(&b.terminal) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{kind}: {u} vs {v}");
            }
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn girsanov_weight_is_one_for_zero_shift() {
        assert_eq!(girsanov_weight(&[0.0, 0.0], &[0.3, -2.0], 1.0), 1.0);
        let w = girsanov_weight(&[0.5, -1.0], &[0.2, 0.1], 0.5);
        assert!((w - (0.1 - 0.1 - 0.3125_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn wrong_draw_length_is_rejected() {
        let m = sabr();
        let draw = TrajectoryDraw {
            z: vec![0.0; 3],
            lambda: vec![1; 2],
        };
        assert!(simulate_trajectory(SchemeKind::Nv, &m, 2, 1.0, &[1.0, 0.3], &draw).is_err());
    }
}
