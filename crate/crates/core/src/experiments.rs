//! The three benchmark experiments: parameter sets, initial states, payoffs,
//! reference prices, step grids and the published (scheme, K, M, error) cells.

use serde::{Deserialize, Serialize};

use crate::drift::Matrix;
use crate::models::{GenSabrParams, ModelParams, MultiSabrParams, SabrParams};
use crate::pricing::{Payoff, GENSABR_REFERENCE, MULTISABR_REFERENCE, SABR_REFERENCE};
use crate::schemes::SchemeKind;

/// Step counts used for the convergence plots.
pub const CONVERGENCE_KS: [usize; 5] = [4, 8, 16, 32, 64];

/// Trajectories per convergence cell.
pub const CONVERGENCE_M: u64 = 1 << 20;

/// One row of a published timing table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedCell {
    pub scheme: SchemeKind,
    pub k: usize,
    pub m: u64,
    pub rel_error: f64,
}

/// A fully specified pricing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelParams,
    pub x0: Vec<f64>,
    pub payoff: Payoff,
    pub horizon: f64,
    pub reference: Option<f64>,
}

/// How to turn the printed (asymmetric) 8×8 correlation into a symmetric one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetrization {
    /// `(ρ + ρᵀ)/2`. Not positive-definite.
    Average,
    /// Lower triangle mirrored upward. Not positive-definite.
    Lower,
    /// Upper triangle mirrored downward. The only positive-definite choice.
    Upper,
}

pub const SABR_STRIKE: f64 = 1.05;
pub const GENSABR_STRIKE: f64 = 1.05;
pub const MULTISABR_STRIKE: f64 = 1.05;

/// Starting level of every volatility factor in the basket experiment.
/// Not published; picked so that the long-step limit matches the reference.
pub const MULTISABR_FACTOR_START: f64 = 0.8;

pub fn sabr_params() -> SabrParams {
    SabrParams { a: 1.0, b: 0.4, beta: 0.9, rho: -0.7 }
}

pub fn gensabr_params() -> GenSabrParams {
    GenSabrParams { a: 1.0, b: 0.5, alpha: 0.5, beta: 1.0, kappa: 2.0, theta: 0.3, rho: -0.7 }
}

/// Correlation of `(B̃_1..B̃_4, W̃_1..W̃_4)` exactly as printed, entries (1,6)
/// and (6,1) disagree.
#[rustfmt::skip]
pub fn multisabr_printed_rho() -> Matrix {
    Matrix::from_rows(&[
        vec![ 1.0,     0.0111,  0.6395, -0.1081, -0.3414, -0.0642, -0.2054, -0.0236],
        vec![ 0.0111,  1.0,     0.2698,  0.2770,  0.1651, -0.3504, -0.8186, -0.4383],
        vec![ 0.6395,  0.2698,  1.0,    -0.1381, -0.1379, -0.0031, -0.3169, -0.0161],
        vec![-0.1081,  0.2770, -0.1381,  1.0,     0.7312, -0.9030,  0.0419, -0.8121],
        vec![-0.3414,  0.1651, -0.1379,  0.7312,  1.0,    -0.5969,  0.0747, -0.6703],
        vec![-0.6420, -0.3504, -0.0031, -0.9030, -0.5969,  1.0,     0.1878,  0.8790],
        vec![-0.2054, -0.8186, -0.3169,  0.0419,  0.0747,  0.1878,  1.0,     0.2796],
        vec![-0.0236, -0.4383, -0.0161, -0.8121, -0.6703,  0.8790,  0.2796,  1.0   ],
    ])
}

pub fn multisabr_params(sym: Symmetrization) -> MultiSabrParams {
    let raw = multisabr_printed_rho();
    let rho = match sym {
        Symmetrization::Average => raw.symmetrize_average(),
        Symmetrization::Lower => raw.symmetrize_lower(),
        Symmetrization::Upper => raw.symmetrize_upper(),
    };
    MultiSabrParams {
        a: vec![1.0, 0.5, 0.3, 0.7],
        b: vec![0.5, 0.8, 0.4, 0.6],
        alpha: vec![0.5, 1.0, 0.7, 0.8],
        beta: vec![0.6, 0.7, 0.8, 0.9],
        kappa: vec![0.2, 0.7, 0.5, 0.9],
        theta: vec![0.3, 0.4, 0.6, 0.2],
        rho: rho.as_slice().to_vec(),
    }
}

pub fn sabr() -> Experiment {
    Experiment {
        model: ModelParams::Sabr(sabr_params()),
        x0: vec![1.0, 0.3],
        payoff: Payoff::EuropeanCall { strike: SABR_STRIKE },
        horizon: 1.0,
        reference: Some(SABR_REFERENCE),
    }
}

pub fn gensabr() -> Experiment {
    Experiment {
        model: ModelParams::GenSabr(gensabr_params()),
        x0: vec![1.0, 0.2],
        payoff: Payoff::EuropeanCall { strike: GENSABR_STRIKE },
        horizon: 1.0,
        reference: Some(GENSABR_REFERENCE),
    }
}

pub fn multisabr(sym: Symmetrization) -> Experiment {
    let mut x0 = Vec::with_capacity(8);
    for _ in 0..4 {
        x0.push(1.0);
        x0.push(MULTISABR_FACTOR_START);
    }
    Experiment {
        model: ModelParams::MultiSabr(multisabr_params(sym)),
        x0,
        payoff: Payoff::BasketCall { strike: MULTISABR_STRIKE, weights: None },
        horizon: 1.0,
        reference: Some(MULTISABR_REFERENCE),
    }
}

fn cell(scheme: SchemeKind, k: usize, m: u64, rel_error: f64) -> PublishedCell {
    PublishedCell { scheme, k, m, rel_error }
}

pub fn sabr_table() -> Vec<PublishedCell> {
    vec![
        cell(SchemeKind::Euler, 32, 512_000, 0.00150),
        cell(SchemeKind::Nv, 2, 512_000, 0.00134),
        cell(SchemeKind::NvDrift, 2, 128_000, 0.00140),
    ]
}

pub fn gensabr_table() -> Vec<PublishedCell> {
    vec![
        cell(SchemeKind::Euler, 32, 8_192_000, 0.00174),
        cell(SchemeKind::Nv, 4, 2_048_000, 0.00204),
        cell(SchemeKind::NvDrift, 4, 1_024_000, 0.00104),
    ]
}

pub fn multisabr_table() -> Vec<PublishedCell> {
    vec![
        cell(SchemeKind::Euler, 32, 2_048_000, 0.000934),
        cell(SchemeKind::Nv, 4, 1_024_000, 0.002017),
        cell(SchemeKind::NvDrift, 4, 1_024_000, 0.000862),
    ]
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 5] = ["sabr", "gensabr", "multisabr", "multisabr_avg", "multisabr_lower"];

/// Experiment plus its published timing cells.
pub fn preset(name: &str) -> Option<(Experiment, Vec<PublishedCell>)> {
    Some(match name {
        "sabr" => (sabr(), sabr_table()),
        "gensabr" => (gensabr(), gensabr_table()),
        "multisabr" => (multisabr(Symmetrization::Upper), multisabr_table()),
        "multisabr_avg" => (multisabr(Symmetrization::Average), multisabr_table()),
        "multisabr_lower" => (multisabr(Symmetrization::Lower), multisabr_table()),
        _ => return None,
    })
}
