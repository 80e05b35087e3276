//! Toy source/target distributions and the MMD sample-quality metric.
//!
//! Sample `i` of a draw is generated from its own keyed stream, so arrays
//! are reproducible under a seed and a prefix of a larger draw equals the
//! smaller draw.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::noise::{keyed_rng, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Gaussians8,
    TwoMoons,
    Checkerboard,
    /// Eight Gaussians as targets, paired with contracted noisy copies.
    ContractNoise,
}

impl std::str::FromStr for DatasetName {
    type Err = FodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians8" => Ok(Self::Gaussians8),
            "two_moons" => Ok(Self::TwoMoons),
            "checkerboard" => Ok(Self::Checkerboard),
            "contract_noise" => Ok(Self::ContractNoise),
            other => Err(FodError::InvalidArgument(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// `x0 ~ N(0, I)` independent of `mu`.
    Unconditional,
    /// `x0 = 0.5 mu + N(0, 0.3^2 I)`.
    Conditional,
}

impl std::str::FromStr for PairMode {
    type Err = FodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(Self::Unconditional),
            "conditional" => Ok(Self::Conditional),
            other => Err(FodError::InvalidArgument(format!("unknown pairing mode '{other}'"))),
        }
    }
}

pub const CONTRACTION: f64 = 0.5;
pub const DEGRADATION_STD: f64 = 0.3;

const GAUSSIANS8_RADIUS: f64 = 2.0;
const GAUSSIANS8_STD: f64 = 0.1;
const MOONS_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub name: DatasetName,
    pub mode: PairMode,
}

impl PairedDataset {
    pub fn new(name: DatasetName, mode: PairMode) -> Self {
        Self { name, mode }
    }

    /// `contract_noise` pairs conditionally; the rest pair with Gaussian noise.
    pub fn with_default_mode(name: DatasetName) -> Self {
        let mode = match name {
            DatasetName::ContractNoise => PairMode::Conditional,
            _ => PairMode::Unconditional,
        };
        Self { name, mode }
    }

    pub fn dim(&self) -> usize {
        2
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn target_point<R: Rng>(name: DatasetName, rng: &mut R) -> [f64; 2] {
    match name {
        DatasetName::Gaussians8 | DatasetName::ContractNoise => {
            let j = rng.random_range(0..8u32);
            let angle = 2.0 * PI * j as f64 / 8.0;
            [
                GAUSSIANS8_RADIUS * angle.cos() + GAUSSIANS8_STD * gauss(rng),
                GAUSSIANS8_RADIUS * angle.sin() + GAUSSIANS8_STD * gauss(rng),
            ]
        }
        DatasetName::TwoMoons => {
            let upper = rng.random_bool(0.5);
            let u = rng.random_range(0.0..PI);
            let (x, y) = if upper { (u.cos(), u.sin()) } else { (1.0 - u.cos(), 0.5 - u.sin()) };
            [x + MOONS_NOISE * gauss(rng), y + MOONS_NOISE * gauss(rng)]
        }
        DatasetName::Checkerboard => {
            // cells (i, j) in {-2..1}^2 with i + j even; 8 of them
            let cell = rng.random_range(0..8i32);
            let row = cell / 2 - 2;
            let col = 2 * (cell % 2) + row.rem_euclid(2) - 2;
            [col as f64 + rng.random::<f64>(), row as f64 + rng.random::<f64>()]
        }
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(FodError::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(())
}

/// `n` draws from the dataset's target distribution, one per row.
pub fn sample_target(ds: &PairedDataset, n: usize, seed: u64) -> Result<Array2<f64>> {
    check_count(n)?;
    let mut out = Array2::zeros((n, ds.dim()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut rng = keyed_rng(seed, Domain::Data, i as u64, 0);
        let p = target_point(ds.name, &mut rng);
        row[0] = p[0];
        row[1] = p[1];
    }
    Ok(out)
}

/// Paired `(x0, mu)` draws. The `mu` rows coincide with [`sample_target`]
/// under the same seed.
pub fn sample_pair(ds: &PairedDataset, n: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let mu = sample_target(ds, n, seed)?;
    let mut x0 = Array2::zeros(mu.raw_dim());
    for (i, (mut x, m)) in x0.rows_mut().into_iter().zip(mu.rows()).enumerate() {
        let mut rng = keyed_rng(seed, Domain::Data, i as u64, 1);
        for (xj, &mj) in x.iter_mut().zip(m.iter()) {
            *xj = match ds.mode {
                PairMode::Unconditional => gauss(&mut rng),
                PairMode::Conditional => CONTRACTION * mj + DEGRADATION_STD * gauss(&mut rng),
            };
        }
    }
    Ok((x0, mu))
}

/// Source draws alone (the `x0` half of [`sample_pair`]).
pub fn sample_source(ds: &PairedDataset, n: usize, seed: u64) -> Result<Array2<f64>> {
    Ok(sample_pair(ds, n, seed)?.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Unbiased squared MMD with a Gaussian kernel, clamped at zero.
pub fn mmd(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(FodError::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if x.ncols() != y.ncols() {
        return Err(FodError::DimensionMismatch { expected: x.ncols(), got: y.ncols() });
    }
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(FodError::InvalidArgument("unbiased MMD needs at least two samples per side".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let (xs, ys) = (rows(x), rows(y));

    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        let n = s.len() as f64;
        2.0 * acc / (n * (n - 1.0))
    };
    let mut cross = 0.0;
    for a in &xs {
        for b in &ys {
            cross += k(a, b);
        }
    }
    let cross = cross / (xs.len() as f64 * ys.len() as f64);
    Ok((within(&xs) + within(&ys) - 2.0 * cross).max(0.0))
}

/// Median pairwise distance over (at most) the first 1000 rows.
pub fn median_heuristic(x: ArrayView2<f64>) -> Result<f64> {
    let xs: Vec<Vec<f64>> = rows(x).into_iter().take(1000).collect();
    let mut d = Vec::with_capacity(xs.len() * xs.len() / 2);
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            d.push(sq_dist(&xs[i], &xs[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(FodError::InvalidArgument("median heuristic needs at least two samples".into()));
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if !(med > 0.0) {
        return Err(FodError::InvalidArgument("all samples coincide".into()));
    }
    Ok(med)
}

/// Permutation calibration of [`mmd`]: returns the observed statistic and
/// the fraction of `perms` pooled relabelings whose MMD is at least as large.
pub fn mmd_permutation_test(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    bandwidth: f64,
    perms: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let observed = mmd(x, y, bandwidth)?;
    let pooled = ndarray::concatenate(ndarray::Axis(0), &[x, y])
        .map_err(|e| FodError::InvalidArgument(e.to_string()))?;
    let m = x.nrows();
    let mut idx: Vec<usize> = (0..pooled.nrows()).collect();
    let mut exceed = 0usize;
    for p in 0..perms {
        let mut rng = keyed_rng(seed, Domain::Verify, p as u64, 0);
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let a = pooled.select(ndarray::Axis(0), &idx[..m]);
        let b = pooled.select(ndarray::Axis(0), &idx[m..]);
        if mmd(a.view(), b.view(), bandwidth)? >= observed {
            exceed += 1;
        }
    }
    Ok((observed, exceed as f64 / perms.max(1) as f64))
}
