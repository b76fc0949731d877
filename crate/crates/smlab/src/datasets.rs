//! Toy densities with samplers and, where available, analytic score
//! oracles: the checkerboard density (uniform on alternating unit squares)
//! and isotropic Gaussian mixtures whose perturbed score is available in
//! closed form — Gaussian convolution keeps a GMM a GMM, so the oracle
//! covers every noise level exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Uniform density on the "on" squares of a checkerboard: unit squares in
/// `[−extent, extent]²` whose integer cell coordinates have even parity.
#[derive(Clone, Copy, Debug)]
pub struct Checkerboard {
    pub extent: f64,
    pub square: f64,
}

impl Default for Checkerboard {
    fn default() -> Self {
        Checkerboard {
            extent: 4.0,
            square: 1.0,
        }
    }
}

impl Checkerboard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cells per axis (8 for the default board).
    pub fn cells_per_axis(&self) -> usize {
        ((2.0 * self.extent) / self.square).round() as usize
    }

    /// Number of "on" squares (32 for the default board).
    pub fn on_cell_count(&self) -> usize {
        self.cells_per_axis() * self.cells_per_axis() / 2
    }

    /// True iff the point lies in `[−extent, extent)²` on a square with
    /// even cell parity.
    pub fn on_support(&self, x1: f64, x2: f64) -> bool {
        if x1 < -self.extent || x1 >= self.extent || x2 < -self.extent || x2 >= self.extent {
            return false;
        }
        let i = (x1 / self.square).floor() as i64;
        let j = (x2 / self.square).floor() as i64;
        (i + j).rem_euclid(2) == 0
    }

    /// Rejection sampling: uniform proposals on the bounding box, accepted
    /// iff on-support; exactly `n` accepted points, flattened row-major.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * n);
        let chunk = 1024usize;
        while out.len() < 2 * n {
            let props = rng::uniform(rng, 2 * chunk, -self.extent, self.extent);
            for pair in props.chunks_exact(2) {
                if out.len() == 2 * n {
                    break;
                }
                if self.on_support(pair[0], pair[1]) {
                    out.extend_from_slice(pair);
                }
            }
        }
        out
    }

    /// Fraction of the given points (flattened `[n,2]`) on the support.
    pub fn on_support_fraction(&self, points: &[f64]) -> f64 {
        let n = points.len() / 2;
        if n == 0 {
            return 0.0;
        }
        let hits = points
            .chunks_exact(2)
            .filter(|p| self.on_support(p[0], p[1]))
            .count();
        hits as f64 / n as f64
    }

    /// Per-on-square share of the on-support points, in row-major cell
    /// order. Sums to 1 whenever any point is on-support.
    pub fn occupancy_fractions(&self, points: &[f64]) -> Vec<f64> {
        let cells = self.cells_per_axis();
        let mut slots = vec![usize::MAX; cells * cells];
        let mut next = 0usize;
        for j in 0..cells {
            for i in 0..cells {
                if (i + j) % 2 == 0 {
                    slots[j * cells + i] = next;
                    next += 1;
                }
            }
        }
        let mut counts = vec![0usize; next];
        let mut total = 0usize;
        for p in points.chunks_exact(2) {
            if !self.on_support(p[0], p[1]) {
                continue;
            }
            let i = ((p[0] + self.extent) / self.square).floor() as usize;
            let j = ((p[1] + self.extent) / self.square).floor() as usize;
            counts[slots[j * cells + i]] += 1;
            total += 1;
        }
        if total == 0 {
            return vec![0.0; next];
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Isotropic Gaussian mixture with closed-form log-density and score at
/// any added noise variance.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    taus: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, taus: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != taus.len() {
            return Err(Error::Config(
                "mixture needs matching, non-empty weights/means/taus".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        if taus.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dim".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(GaussianMixture {
            weights,
            means,
            taus,
            dim,
        })
    }

    /// The default oracle: 8 equal-weight components on a radius-3 ring,
    /// each with std 0.3.
    pub fn ring8() -> Self {
        let k = 8usize;
        let mut means = Vec::with_capacity(k);
        for i in 0..k {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            means.push(vec![3.0 * angle.cos(), 3.0 * angle.sin()]);
        }
        GaussianMixture::new(vec![1.0; k], means, vec![0.3; k]).expect("valid ring")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// The mixture convolved with N(0, extra_var·I): stds become
    /// √(τ_k² + extra_var).
    pub fn widened(&self, extra_var: f64) -> Result<Self> {
        if !(extra_var >= 0.0) {
            return Err(Error::Config(format!(
                "extra_var must be ≥ 0, got {extra_var}"
            )));
        }
        let taus = self
            .taus
            .iter()
            .map(|&t| (t * t + extra_var).sqrt())
            .collect();
        GaussianMixture::new(self.weights.clone(), self.means.clone(), taus)
    }

    fn component_logliks(&self, x: &[f64], extra_var: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape("gmm", self.dim, x.len()));
        }
        if !(extra_var >= 0.0) {
            return Err(Error::Config(format!(
                "extra_var must be ≥ 0, got {extra_var}"
            )));
        }
        let d = self.dim as f64;
        let mut lls = Vec::with_capacity(self.weights.len());
        for k in 0..self.weights.len() {
            let var = self.taus[k] * self.taus[k] + extra_var;
            let sq: f64 = x
                .iter()
                .zip(&self.means[k])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            let ll = self.weights[k].ln()
                - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                - 0.5 * sq / var;
            lls.push(ll);
        }
        Ok(lls)
    }

    /// log p(x) of the mixture widened by `extra_var`, via log-sum-exp.
    pub fn log_density(&self, x: &[f64], extra_var: f64) -> Result<f64> {
        let lls = self.component_logliks(x, extra_var)?;
        let m = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lls.iter().map(|&l| (l - m).exp()).sum();
        Ok(m + sum.ln())
    }

    /// ∇_x log p(x) of the widened mixture: Σ_k γ_k(x)·(μ_k − x)/(τ_k² +
    /// extra_var) with responsibilities γ computed in log-space, so heavy
    /// underflow never produces NaN.
    pub fn score(&self, x: &[f64], extra_var: f64) -> Result<Vec<f64>> {
        let lls = self.component_logliks(x, extra_var)?;
        let m = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut gammas: Vec<f64> = lls.iter().map(|&l| (l - m).exp()).collect();
        let total: f64 = gammas.iter().sum();
        for g in &mut gammas {
            *g /= total;
        }
        let mut out = vec![0.0; self.dim];
        for k in 0..self.weights.len() {
            let var = self.taus[k] * self.taus[k] + extra_var;
            for i in 0..self.dim {
                out[i] += gammas[k] * (self.means[k][i] - x[i]) / var;
            }
        }
        Ok(out)
    }

    /// Scores for a flattened `[n, dim]` batch of points.
    pub fn score_rows(&self, points: &[f64], extra_var: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for row in points.chunks_exact(self.dim) {
            out.extend_from_slice(&self.score(row, extra_var)?);
        }
        Ok(out)
    }

    /// Ancestral sampling: per point one categorical draw, then `dim`
    /// standard normals. Returns flattened rows.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut cum = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cum.push(acc);
        }
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u = rng::uniform(rng, 1, 0.0, 1.0)[0];
            let k = cum
                .iter()
                .position(|&c| u < c)
                .unwrap_or(self.weights.len() - 1);
            let z = rng::standard_normal(rng, self.dim);
            for i in 0..self.dim {
                out.push(self.means[k][i] + self.taus[k] * z[i]);
            }
        }
        out
    }
}

/// Writes flattened 2-D points as CSV (`x1,x2` header, one point per line,
/// 17 significant digits — enough for exact f64 round-trips).
pub fn write_points_csv(path: &Path, points: &[f64]) -> Result<()> {
    if points.len() % 2 != 0 {
        return Err(Error::shape("write_points_csv", "[n,2]", points.len()));
    }
    let file = File::create(path).map_err(|e| {
        Error::Config(format!("cannot create {}: {e}", path.display()))
    })?;
    let mut w = BufWriter::new(file);
    writeln!(w, "x1,x2")?;
    for p in points.chunks_exact(2) {
        writeln!(w, "{:.16e},{:.16e}", p[0], p[1])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads points written by [`write_points_csv`].
pub fn read_points_csv(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| {
        Error::Config(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::Config(format!("{}:{}: bad number: {e}", path.display(), idx + 1))
            })?;
            out.push(v);
        }
    }
    Ok(out)
}
