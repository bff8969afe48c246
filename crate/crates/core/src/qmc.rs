//! Point sources for the expectation: an unscrambled Sobol sequence and a
//! seeded pseudo-random fallback, the inverse normal transform, and the layout
//! assigning point coordinates to a trajectory's Gaussian increments and coin
//! flips.
//!
//! Direction numbers are the Joe–Kuo D6 table (`data/joe_kuo_d6_1024.txt`,
//! 1024 dimensions). The file has one line per dimension `d s a m_1 .. m_s`,
//! starting from dimension 2; dimension 1 uses `m_k = 1` throughout.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::schemes::SchemeKind;

const DIRECTION_TABLE: &str = include_str!("../data/joe_kuo_d6_1024.txt");
const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4_294_967_296.0;

/// Highest dimension the embedded table supports.
pub const MAX_SOBOL_DIM: usize = 1024;

/// Sobol direction numbers for a fixed dimension.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    dim: usize,
    /// `v[k * dim + j]`: direction number for bit `k` of dimension `j`.
    v: Vec<u32>,
}

fn parsed_table() -> &'static [(u32, u32, Vec<u32>)] {
    static TABLE: OnceLock<Vec<(u32, u32, Vec<u32>)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        DIRECTION_TABLE
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<u32> = l
                    .split_whitespace()
                    .map(|t| t.parse().expect("direction table is numeric"))
                    .collect();
                (f[1], f[2], f[3..].to_vec())
            })
            .collect()
    })
}

impl SobolSequence {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_SOBOL_DIM {
            return Err(Error::param(
                "dim",
                format!("Sobol dimension {dim} outside 1..={MAX_SOBOL_DIM}"),
            ));
        }
        let table = parsed_table();
        let mut v = vec![0u32; BITS * dim];
        for k in 0..BITS {
            v[k * dim] = 1u32 << (BITS - 1 - k);
        }
        for j in 1..dim {
            let (s, a, m) = &table[j - 1];
            let s = *s as usize;
            let mut col = [0u32; BITS];
            for k in 0..BITS {
                col[k] = if k < s {
                    m[k] << (BITS - 1 - k)
                } else {
                    let mut x = col[k - s] ^ (col[k - s] >> s);
                    for i in 1..s {
                        if (a >> (s - 1 - i)) & 1 == 1 {
                            x ^= col[k - i];
                        }
                    }
                    x
                };
            }
            for k in 0..BITS {
                v[k * dim + j] = col[k];
            }
        }
        Ok(Self { dim, v })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Point at absolute index `index` (≥ 1), in Gray-code order.
    pub fn point(&self, index: u64, out: &mut [f64]) -> Result<()> {
        check_index(index)?;
        if out.len() != self.dim {
            return Err(dim_error(self.dim, out.len()));
        }
        let mut acc = vec![0u32; self.dim];
        self.state_at(index, &mut acc);
        for (o, &a) in out.iter_mut().zip(&acc) {
            *o = a as f64 * SCALE;
        }
        Ok(())
    }

    fn state_at(&self, index: u64, acc: &mut [u32]) {
        acc.fill(0);
        let gray = index ^ (index >> 1);
        for k in 0..BITS {
            if (gray >> k) & 1 == 1 {
                let row = &self.v[k * self.dim..(k + 1) * self.dim];
                for (a, &r) in acc.iter_mut().zip(row) {
                    *a ^= r;
                }
            }
        }
    }

    /// A cursor positioned so that the next point returned is `start`.
    pub fn cursor(&self, start: u64) -> Result<SobolCursor<'_>> {
        check_index(start)?;
        let mut state = vec![0u32; self.dim];
        self.state_at(start - 1, &mut state);
        Ok(SobolCursor {
            seq: self,
            next: start,
            state,
        })
    }

    /// Points `start..start + count`, row-major.
    pub fn points(&self, start: u64, count: usize) -> Result<Vec<f64>> {
        let mut cur = self.cursor(start)?;
        let mut out = vec![0.0; count * self.dim];
        for row in out.chunks_mut(self.dim) {
            cur.next_into(row)?;
        }
        Ok(out)
    }
}

fn check_index(index: u64) -> Result<()> {
    if index == 0 || index >= 1 << BITS {
        return Err(Error::param(
            "index",
            format!("Sobol index {index} outside 1..2^{BITS}"),
        ));
    }
    Ok(())
}

fn dim_error(expected: usize, got: usize) -> Error {
    Error::Dimension {
        expected,
        got,
        context: "Sobol point".into(),
    }
}

/// Sequential Sobol generator (Gray-code update, one XOR row per point).
#[derive(Debug, Clone)]
pub struct SobolCursor<'a> {
    seq: &'a SobolSequence,
    next: u64,
    state: Vec<u32>,
}

impl SobolCursor<'_> {
    pub fn next_index(&self) -> u64 {
        self.next
    }

    pub fn next_into(&mut self, out: &mut [f64]) -> Result<()> {
        check_index(self.next)?;
        let dim = self.seq.dim;
        if out.len() != dim {
            return Err(dim_error(dim, out.len()));
        }
        // gray(n) and gray(n − 1) differ in the lowest set bit of n
        let k = self.next.trailing_zeros() as usize;
        let row = &self.seq.v[k * dim..(k + 1) * dim];
        for ((s, &r), o) in self.state.iter_mut().zip(row).zip(out.iter_mut()) {
            *s ^= r;
            *o = *s as f64 * SCALE;
        }
        self.next += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Inverse normal CDF (Wichura, AS241 PPND16)
// ---------------------------------------------------------------------------

const A: [f64; 8] = [
    3.387_132_872_796_366_608,
    133.141_667_891_784_377_45,
    1_971.590_950_306_551_442_7,
    13_731.693_765_509_461_125,
    45_921.953_931_549_871_457,
    67_265.770_927_008_700_853,
    33_430.575_583_588_128_105,
    2_509.080_928_730_122_672_7,
];
const B: [f64; 8] = [
    1.0,
    42.313_330_701_600_911_252,
    687.187_007_492_057_908_3,
    5_394.196_021_424_751_107_7,
    21_213.794_301_586_595_867,
    39_307.895_800_092_710_61,
    28_729.085_735_721_942_674,
    5_226.495_278_852_854_561,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    0.241_780_725_177_450_611_77,
    0.022_723_844_989_269_184_583_3,
    7.745_450_142_783_414_076_4e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    0.689_767_334_985_100_004_55,
    0.148_103_976_427_480_074_59,
    0.015_198_666_563_616_457_196_6,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    0.296_560_571_828_504_891_23,
    0.026_532_189_526_576_123_093,
    0.001_242_660_947_388_078_438_6,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F: [f64; 8] = [
    1.0,
    0.599_832_206_555_887_937_69,
    0.136_929_880_922_735_805_31,
    0.014_875_361_290_850_614_852_5,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

#[inline]
fn ratio(p: &[f64; 8], q: &[f64; 8], r: f64) -> f64 {
    let num = ((((((p[7] * r + p[6]) * r + p[5]) * r + p[4]) * r + p[3]) * r + p[2]) * r + p[1]) * r + p[0];
    let den = ((((((q[7] * r + q[6]) * r + q[5]) * r + q[4]) * r + q[3]) * r + q[2]) * r + q[1]) * r + q[0];
    num / den
}

/// `Φ⁻¹(u)` for `u` in the open interval `(0, 1)`.
pub fn inverse_normal_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(
            "inverse normal CDF",
            format!("{u} is outside (0, 1)"),
        ));
    }
    Ok(inverse_normal_cdf_unchecked(u))
}

/// [`inverse_normal_cdf`] without the range check; `u` must lie in `(0, 1)`.
#[inline]
pub fn inverse_normal_cdf_unchecked(u: f64) -> f64 {
    let q = u - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * ratio(&A, &B, r);
    }
    let tail = if q < 0.0 { u } else { 1.0 - u };
    let mut r = (-tail.ln()).sqrt();
    let v = if r <= 5.0 {
        r -= 1.6;
        ratio(&C, &D, r)
    } else {
        r -= 5.0;
        ratio(&E, &F, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

// ---------------------------------------------------------------------------
// Layout and draws
// ---------------------------------------------------------------------------

/// How the `D` coordinates of one point map onto a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionLayout {
    pub steps: usize,
    pub noise_dim: usize,
    pub scheme: SchemeKind,
    pub dim: usize,
}

impl DimensionLayout {
    pub fn new(scheme: SchemeKind, steps: usize, noise_dim: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("K", "at least one step is required"));
        }
        let per_step = noise_dim + usize::from(scheme.uses_coin());
        Ok(Self {
            steps,
            noise_dim,
            scheme,
            dim: steps * per_step,
        })
    }

    pub fn per_step(&self) -> usize {
        self.dim / self.steps
    }
}

/// Standard normal increments `z[k * d + j]` and coins `lambda[k]` (±1) of one
/// trajectory. Coins are empty for Euler.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryDraw {
    pub z: Vec<f64>,
    pub lambda: Vec<i8>,
}

impl TrajectoryDraw {
    pub fn for_layout(layout: &DimensionLayout) -> Self {
        Self {
            z: vec![0.0; layout.steps * layout.noise_dim],
            lambda: if layout.scheme.uses_coin() {
                vec![0; layout.steps]
            } else {
                Vec::new()
            },
        }
    }

    pub fn step_increments(&self, k: usize, d: usize) -> &[f64] {
        &self.z[k * d..(k + 1) * d]
    }
}

/// Maps a uniform point to a draw. Within each step slice the first `d`
/// coordinates are the increments and, for the NV family, the last one is
/// the coin: `Λ = −1` iff `u < ½`.
pub fn draw_trajectory(layout: &DimensionLayout, point: &[f64]) -> Result<TrajectoryDraw> {
    let mut draw = TrajectoryDraw::for_layout(layout);
    draw_trajectory_into(layout, point, &mut draw)?;
    Ok(draw)
}

pub fn draw_trajectory_into(
    layout: &DimensionLayout,
    point: &[f64],
    draw: &mut TrajectoryDraw,
) -> Result<()> {
    if point.len() != layout.dim {
        return Err(Error::Dimension {
            expected: layout.dim,
            got: point.len(),
            context: "trajectory point".into(),
        });
    }
    let d = layout.noise_dim;
    let per = layout.per_step();
    let coin = layout.scheme.uses_coin();
    draw.z.resize(layout.steps * d, 0.0);
    draw.lambda.resize(if coin { layout.steps } else { 0 }, 0);
    for (k, slice) in point.chunks_exact(per).enumerate() {
        for j in 0..d {
            draw.z[k * d + j] = inverse_normal_cdf(slice[j])?;
        }
        if coin {
            draw.lambda[k] = if slice[d] < 0.5 { -1 } else { 1 };
        }
    }
    Ok(())
}

/// Where trajectory points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PointSource {
    /// Sobol points at indices `1..=M`.
    Sobol,
    /// Independent uniforms; trajectory `i` uses ChaCha8 stream `i` of `seed`.
    Mc { seed: u64 },
}

impl Default for PointSource {
    fn default() -> Self {
        PointSource::Sobol
    }
}

/// Per-worker generator producing the point of any trajectory index; the
/// point for a given index does not depend on which worker produces it.
pub enum PointStream<'a> {
    Sobol(SobolCursor<'a>),
    Mc { seed: u64, next: u64 },
}

impl<'a> PointStream<'a> {
    /// Stream whose first point belongs to trajectory `start` (0-based).
    pub fn new(source: PointSource, seq: Option<&'a SobolSequence>, start: u64) -> Result<Self> {
        match source {
            PointSource::Sobol => {
                let seq = seq.ok_or_else(|| {
                    Error::Unsupported("Sobol source needs a direction table".into())
                })?;
                Ok(PointStream::Sobol(seq.cursor(start + 1)?))
            }
            PointSource::Mc { seed } => Ok(PointStream::Mc { seed, next: start }),
        }
    }

    pub fn next_into(&mut self, out: &mut [f64]) -> Result<()> {
        match self {
            PointStream::Sobol(c) => c.next_into(out),
            PointStream::Mc { seed, next } => {
                mc_point(*seed, *next, out);
                *next += 1;
                Ok(())
            }
        }
    }
}

/// Uniforms in the open interval `(0, 1)` for trajectory `index`.
pub fn mc_point(seed: u64, index: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    for o in out.iter_mut() {
        *o = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
    }
}
