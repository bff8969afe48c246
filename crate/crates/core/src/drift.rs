//! Brownian drift shifts γ that turn the Stratonovich drift into
//! `V_0^(γ) = V_0 − Σ_j γ_j V_j`, plus the small dense linear algebra they need.

use crate::error::{Error, Result};
use crate::models::{GenSabrParams, MultiSabrParams, SabrFamily, Sde};

/// Relative pivot threshold for positive-definiteness: a pivot must exceed
/// this times the largest diagonal entry.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "matrix data must be n*n");
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n, vec![0.0; n * n]);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        Self::new(n, rows.iter().flatten().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = self.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::new(n, vec![0.0; n * n]);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.get(i, j) == 0.0))
    }

    /// Checks symmetry (to 1e-12), unit diagonal and positive-definiteness.
    pub fn validate_correlation(&self, name: &str) -> Result<()> {
        for i in 0..self.n {
            if (self.get(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::param(
                    name,
                    format!("diagonal entry ({i},{i}) = {} is not 1", self.get(i, i)),
                ));
            }
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > 1e-12 {
                    return Err(Error::param(
                        name,
                        format!(
                            "not symmetric: ({i},{j}) = {} but ({j},{i}) = {}",
                            self.get(i, j),
                            self.get(j, i)
                        ),
                    ));
                }
            }
        }
        cholesky(self).map(|_| ())
    }

    /// `(ρ + ρᵀ) / 2`.
    pub fn symmetrize_average(&self) -> Matrix {
        let t = self.transpose();
        Matrix::new(
            self.n,
            self.data.iter().zip(&t.data).map(|(a, b)| 0.5 * (a + b)).collect(),
        )
    }

    /// Copies the strict lower triangle onto the upper one.
    pub fn symmetrize_lower(&self) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.n {
            for j in 0..i {
                m.set(j, i, self.get(i, j));
            }
        }
        m
    }

    /// Copies the strict upper triangle onto the lower one.
    pub fn symmetrize_upper(&self) -> Matrix {
        self.transpose().symmetrize_lower()
    }
}

/// Lower-triangular `L` with `L Lᵀ = ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    pub fn matrix(&self) -> &Matrix {
        &self.l
    }

    pub fn reconstruct(&self) -> Matrix {
        self.l.mul(&self.l.transpose())
    }

    /// Largest entrywise deviation of `L Lᵀ` from `rho`.
    pub fn residual(&self, rho: &Matrix) -> f64 {
        self.reconstruct().max_abs_diff(rho)
    }
}

pub fn cholesky(rho: &Matrix) -> Result<CholeskyFactor> {
    let n = rho.dim();
    let max_diag = (0..n).map(|i| rho.get(i, i).abs()).fold(0.0, f64::max);
    let threshold = PIVOT_TOLERANCE * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Matrix::new(n, vec![0.0; n * n]);
    for j in 0..n {
        let mut d = rho.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > threshold) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: d,
                threshold,
            });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = rho.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(CholeskyFactor { l })
}

/// Solves `A x = b`: forward substitution when `A` is lower-triangular, dense
/// LU with partial pivoting otherwise.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.is_lower_triangular() {
        forward_substitution(a, b)
    } else {
        lu_solve(a, b)
    }
}

pub fn forward_substitution(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.dim();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for (k, xk) in x.iter().enumerate().take(i) {
            s -= l.get(i, k) * xk;
        }
        let d = l.get(i, i);
        if d == 0.0 {
            return Err(Error::Singular { row: i });
        }
        x[i] = s / d;
    }
    Ok(x)
}

pub fn lu_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.dim();
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap_or(col);
        if m.get(piv, col) == 0.0 {
            return Err(Error::Singular { row: col });
        }
        if piv != col {
            for j in 0..n {
                let t = m.get(col, j);
                m.set(col, j, m.get(piv, j));
                m.set(piv, j, t);
            }
            rhs.swap(col, piv);
        }
        for i in col + 1..n {
            let f = m.get(i, col) / m.get(col, col);
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m.set(i, j, m.get(i, j) - f * m.get(col, j));
            }
            rhs[i] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for (j, xj) in x.iter().enumerate().skip(i + 1) {
            s -= m.get(i, j) * xj;
        }
        x[i] = s / m.get(i, i);
    }
    Ok(x)
}

/// Drift parameters for each Brownian motion, `(γ_1..γ_N, δ_1..δ_N)` in the
/// multi-asset case.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftShift {
    pub gamma: Vec<f64>,
    /// Largest absolute residual of the defining equations.
    pub residual: f64,
}

impl DriftShift {
    pub fn zero(d: usize) -> Self {
        Self {
            gamma: vec![0.0; d],
            residual: 0.0,
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.gamma.iter().map(|g| g * g).sum()
    }
}

/// Closed-form `(γ_1, γ_2)` of the two-factor generalized SABR model:
/// `γ_1 = −αbρ/2`, `γ_2 = (αbρ² − 2κ/b − b) / (2√(1−ρ²))`.
pub fn gensabr_gamma(params: &GenSabrParams) -> Result<DriftShift> {
    params.validate()?;
    let GenSabrParams {
        b,
        alpha,
        kappa,
        rho,
        ..
    } = *params;
    let g1 = -0.5 * alpha * b * rho;
    let g2 = (alpha * b * rho * rho - 2.0 * kappa / b - b) / (2.0 * (1.0 - rho * rho).sqrt());
    // residual of L γ = rhs with L the 2x2 Cholesky factor
    let c = (1.0 - rho * rho).sqrt();
    let r1 = (g1 - (-0.5 * rho * alpha * b)).abs();
    let r2 = (rho * g1 + c * g2 - (-(kappa + 0.5 * b * b) / b)).abs();
    Ok(DriftShift {
        gamma: vec![g1, g2],
        residual: r1.max(r2),
    })
}

/// Right-hand side of the 2N equations fixing `(γ, δ)`.
fn family_rhs(family: &SabrFamily) -> Vec<f64> {
    let assets = family.assets();
    let n = assets.len();
    let mut rhs = vec![0.0; 2 * n];
    for (i, a) in assets.iter().enumerate() {
        rhs[i] = -0.5 * a.q * a.alpha * a.b;
        rhs[n + i] = -(a.kappa + 0.5 * a.b * a.b * a.r) / a.b;
    }
    rhs
}

pub(crate) fn solve_family_shift(family: &SabrFamily) -> Result<DriftShift> {
    let l = family.cholesky().matrix();
    let rhs = family_rhs(family);
    let gamma = solve_linear(l, &rhs)?;
    let back = l.mul_vec(&gamma);
    let residual = back
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DriftShift { gamma, residual })
}

/// `(γ, δ)` for the multi-asset model from the Cholesky factor of its
/// correlation matrix.
pub fn multisabr_gamma_delta(params: &MultiSabrParams, l: &CholeskyFactor) -> Result<DriftShift> {
    params.validate()?;
    let n = params.asset_count();
    let lm = l.matrix();
    if lm.dim() != 2 * n {
        return Err(Error::Dimension {
            expected: 2 * n,
            got: lm.dim(),
            context: "Cholesky factor".into(),
        });
    }
    let mut rhs = vec![0.0; 2 * n];
    for i in 0..n {
        let (mut q, mut r) = (0.0, 0.0);
        for k in 0..2 * n {
            q += lm.get(n + i, k) * lm.get(i, k);
            r += lm.get(n + i, k) * lm.get(n + i, k);
        }
        rhs[i] = -0.5 * q * params.alpha[i] * params.b[i];
        rhs[n + i] = -(params.kappa[i] + 0.5 * params.b[i] * params.b[i] * r) / params.b[i];
    }
    let gamma = solve_linear(lm, &rhs)?;
    let residual = lm
        .mul_vec(&gamma)
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DriftShift { gamma, residual })
}

/// Largest componentwise `|V_0(x) − V_0^(γ)(x) − Σ_j γ_j V_j(x)|` over `states`.
pub fn verify_shift_identity<M: Sde + ?Sized>(
    model: &M,
    gamma: &[f64],
    states: &[Vec<f64>],
) -> Result<f64> {
    if gamma.len() != model.noise_dim() {
        return Err(Error::Dimension {
            expected: model.noise_dim(),
            got: gamma.len(),
            context: "drift shift".into(),
        });
    }
    let n = model.state_dim();
    let (mut v0, mut vg, mut vj) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut worst: f64 = 0.0;
    for x in states {
        model.drift(x, &mut v0)?;
        model.shifted_drift(gamma, x, &mut vg)?;
        let mut sum = vg.clone();
        for (j, &g) in gamma.iter().enumerate() {
            model.diffusion(j, x, &mut vj)?;
            for (s, v) in sum.iter_mut().zip(&vj) {
                *s += g * v;
            }
        }
        for (a, b) in v0.iter().zip(&sum) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}
