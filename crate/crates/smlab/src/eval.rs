//! Validation and measurement: Stein-identity Monte Carlo checks, the
//! trace-estimator convergence study, expectation/summation interchange
//! probes, score-field error against the analytic mixture oracle, density
//! grids, and the per-method training-step benchmark.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::datasets::GaussianMixture;
use crate::error::{Error, Result};
use crate::net::ScoreNet;
use crate::objectives::{self, ObjectiveKind, ObjectiveSpec, MAX_EXACT_DIM};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Step size for the tape-free central differences used by the MC
/// validators. A power of two, so the `/2h` rescaling is exact; the O(h²)
/// truncation (~6e−11) sits far below every Monte Carlo tolerance here.
const FD_H: f64 = 7.62939453125e-6;

/// A smooth vector field together with its Jacobian diagonal, both over
/// flattened `[rows, d]` batches.
pub struct SteinFn<'a> {
    value: Box<dyn Fn(&[f64], usize) -> Vec<f64> + 'a>,
    diag: Box<dyn Fn(&[f64], usize) -> Vec<f64> + 'a>,
    dim: usize,
}

impl<'a> SteinFn<'a> {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64], usize) -> Vec<f64> + 'a,
        diag: impl Fn(&[f64], usize) -> Vec<f64> + 'a,
    ) -> Self {
        SteinFn {
            value: Box::new(value),
            diag: Box::new(diag),
            dim,
        }
    }

    /// Wraps an unconditional net: values via the fast forward pass, the
    /// Jacobian diagonal via central differences (step [`FD_H`]).
    pub fn from_net(net: &'a ScoreNet) -> Result<Self> {
        if net.config.time_conditional {
            return Err(Error::ContractViolation(
                "stein_check wraps unconditional nets; evaluate conditional nets at a fixed t \
                 through SteinFn::new"
                    .into(),
            ));
        }
        let d = net.config.input_dim;
        let value = move |x: &[f64], rows: usize| net.score_plain(x, rows, None).expect("forward");
        let diag = move |x: &[f64], rows: usize| {
            let mut out = vec![0.0; rows * d];
            let mut shifted = x.to_vec();
            for i in 0..d {
                for r in 0..rows {
                    shifted[r * d + i] = x[r * d + i] + FD_H;
                }
                let sp = net.score_plain(&shifted, rows, None).expect("forward");
                for r in 0..rows {
                    shifted[r * d + i] = x[r * d + i] - FD_H;
                }
                let sm = net.score_plain(&shifted, rows, None).expect("forward");
                for r in 0..rows {
                    shifted[r * d + i] = x[r * d + i];
                    out[r * d + i] = (sp[r * d + i] - sm[r * d + i]) / (2.0 * FD_H);
                }
            }
            out
        };
        Ok(SteinFn::new(d, value, diag))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Monte Carlo estimates of both sides of the Stein identity
/// E[h_i(z)(z_i−μ_i)/σ²] = E[∂h_i/∂z_i] under z ∼ N(μ, σ²I).
#[derive(Clone, Debug)]
pub struct SteinCheckReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub n: usize,
    /// Componentwise standard errors of the paired difference lhs − rhs.
    pub se: Vec<f64>,
    pub max_standardized: f64,
}

pub fn stein_check(
    f: &SteinFn,
    mu: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SteinCheckReport> {
    let d = f.dim();
    if mu.len() != d {
        return Err(Error::shape("stein_check", d, mu.len()));
    }
    if n < 100 {
        return Err(Error::Config(format!("stein_check needs N ≥ 100, got {n}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("stein_check needs sigma > 0, got {sigma}")));
    }
    let mut lhs_sum = vec![0.0; d];
    let mut rhs_sum = vec![0.0; d];
    let mut diff_sum = vec![0.0; d];
    let mut diff_sq = vec![0.0; d];
    let chunk = 2048usize;
    let mut left = n;
    while left > 0 {
        let b = left.min(chunk);
        left -= b;
        let mut z = rng::standard_normal(rng, b * d);
        for r in 0..b {
            for i in 0..d {
                z[r * d + i] = mu[i] + sigma * z[r * d + i];
            }
        }
        let h = (f.value)(&z, b);
        let g = (f.diag)(&z, b);
        for r in 0..b {
            for i in 0..d {
                let a = h[r * d + i] * (z[r * d + i] - mu[i]) / (sigma * sigma);
                let bq = g[r * d + i];
                lhs_sum[i] += a;
                rhs_sum[i] += bq;
                let diff = a - bq;
                diff_sum[i] += diff;
                diff_sq[i] += diff * diff;
            }
        }
    }
    let nf = n as f64;
    let lhs: Vec<f64> = lhs_sum.iter().map(|s| s / nf).collect();
    let rhs: Vec<f64> = rhs_sum.iter().map(|s| s / nf).collect();
    let mut se = Vec::with_capacity(d);
    let mut max_std: f64 = 0.0;
    for i in 0..d {
        let mean = diff_sum[i] / nf;
        let var = (diff_sq[i] / nf - mean * mean).max(0.0);
        let s = (var / nf).sqrt();
        let standardized = if s > 0.0 {
            (mean / s).abs()
        } else if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_std = max_std.max(standardized);
        se.push(s);
    }
    Ok(SteinCheckReport {
        lhs,
        rhs,
        n,
        se,
        max_standardized: max_std,
    })
}

/// Tr(∇ₓ s_θ(x)) assembled from d Jacobian rows on the tape.
pub fn exact_trace(net: &ScoreNet, x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d > MAX_EXACT_DIM {
        return Err(Error::ContractViolation(format!(
            "exact_trace supports d ≤ {MAX_EXACT_DIM} (got {d})"
        )));
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x_on = tape.ensure(&Tensor::vector(x))?;
    let s = bound.forward(&mut tape, &x_on, None)?;
    let mut trace = 0.0;
    for i in 0..d {
        let row = tape.jacobian_row(&s, i, &x_on)?;
        trace += row.data()[i];
    }
    Ok(trace)
}

fn fd_traces(net: &ScoreNet, points: &[f64], rows: usize, d: usize) -> Result<Vec<f64>> {
    let mut traces = vec![0.0; rows];
    let mut shifted = points.to_vec();
    for i in 0..d {
        for r in 0..rows {
            shifted[r * d + i] = points[r * d + i] + FD_H;
        }
        let sp = net.score_plain(&shifted, rows, None)?;
        for r in 0..rows {
            shifted[r * d + i] = points[r * d + i] - FD_H;
        }
        let sm = net.score_plain(&shifted, rows, None)?;
        for r in 0..rows {
            shifted[r * d + i] = points[r * d + i];
            traces[r] += (sp[r * d + i] - sm[r * d + i]) / (2.0 * FD_H);
        }
    }
    Ok(traces)
}

/// One Monte Carlo trace estimate E[s(x')ᵀ(x'−x)/σ²] with its standard
/// error, x' = x + σz over `n` draws.
pub fn trace_estimate(
    net: &ScoreNet,
    x: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let d = x.len();
    if n == 0 {
        return Err(Error::Config("trace_estimate needs n ≥ 1".into()));
    }
    let mut sum = 0.0;
    let mut sq = 0.0;
    let chunk = 8192usize;
    let mut left = n;
    while left > 0 {
        let b = left.min(chunk);
        left -= b;
        let z = rng::standard_normal(rng, b * d);
        let mut xs = vec![0.0; b * d];
        for r in 0..b {
            for i in 0..d {
                xs[r * d + i] = x[i] + sigma * z[r * d + i];
            }
        }
        let s = net.score_plain(&xs, b, None)?;
        for r in 0..b {
            let mut v = 0.0;
            for i in 0..d {
                v += s[r * d + i] * z[r * d + i];
            }
            let v = v / sigma;
            sum += v;
            sq += v * v;
        }
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq / nf - mean * mean).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

/// RMS error of the smoothed trace estimator at each sample count, against
/// a high-accuracy reference for E[Tr ∇s(x+σz)].
#[derive(Clone, Debug)]
pub struct TraceConvergenceReport {
    pub ns: Vec<usize>,
    pub rms: Vec<f64>,
    /// Least-squares slope of log RMS against log N (≈ −0.5 for the 1/√N
    /// Monte Carlo law).
    pub slope: f64,
    pub reference: f64,
    pub reference_se: f64,
}

pub fn lcss_trace_convergence(
    net: &ScoreNet,
    x: &[f64],
    sigma: f64,
    ns: &[usize],
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TraceConvergenceReport> {
    let d = x.len();
    if d > MAX_EXACT_DIM {
        return Err(Error::ContractViolation(format!(
            "lcss_trace_convergence supports d ≤ {MAX_EXACT_DIM} (got {d})"
        )));
    }
    if ns.len() < 2 || ns.iter().any(|&n| n == 0) || repeats < 2 {
        return Err(Error::Config(
            "lcss_trace_convergence needs ≥ 2 positive sample counts and ≥ 2 repeats".into(),
        ));
    }
    let n_ref = 200_000usize;
    let (reference, reference_se) = {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let chunk = 8192usize;
        let mut left = n_ref;
        while left > 0 {
            let b = left.min(chunk);
            left -= b;
            let z = rng::standard_normal(rng, b * d);
            let mut xs = vec![0.0; b * d];
            for r in 0..b {
                for i in 0..d {
                    xs[r * d + i] = x[i] + sigma * z[r * d + i];
                }
            }
            for t in fd_traces(net, &xs, b, d)? {
                sum += t;
                sq += t * t;
            }
        }
        let nf = n_ref as f64;
        let mean = sum / nf;
        let var = (sq / nf - mean * mean).max(0.0);
        (mean, (var / nf).sqrt())
    };
    let mut rms = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut acc = 0.0;
        for _ in 0..repeats {
            let (est, _) = trace_estimate(net, x, sigma, n, rng)?;
            let err = est - reference;
            acc += err * err;
        }
        rms.push((acc / repeats as f64).sqrt());
    }
    let logs: Vec<(f64, f64)> = ns
        .iter()
        .zip(&rms)
        .map(|(&n, &r)| ((n as f64).ln(), r.max(1e-300).ln()))
        .collect();
    let mx = logs.iter().map(|(a, _)| a).sum::<f64>() / logs.len() as f64;
    let my = logs.iter().map(|(_, b)| b).sum::<f64>() / logs.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in &logs {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    Ok(TraceConvergenceReport {
        ns: ns.to_vec(),
        rms,
        slope: num / den,
        reference,
        reference_se,
    })
}

/// Both orderings of the Appendix-A interchange: expectation of the summed
/// Jacobian diagonal versus the sum of componentwise expectations.
#[derive(Clone, Debug)]
pub struct InterchangeReport {
    pub expectation_of_sum: f64,
    pub sum_of_expectations: f64,
    /// |difference| with common random numbers: pure summation reordering,
    /// bounded by accumulated rounding, not Monte Carlo error.
    pub crn_discrepancy: f64,
    /// |difference| when each component uses an independent stream.
    pub independent_discrepancy: f64,
    /// Combined standard error for the independent-streams comparison.
    pub combined_se: f64,
    pub n: usize,
}

pub fn interchange_check(
    net: &ScoreNet,
    x: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InterchangeReport> {
    let d = x.len();
    if d > MAX_EXACT_DIM {
        return Err(Error::ContractViolation(format!(
            "interchange_check supports d ≤ {MAX_EXACT_DIM} (got {d})"
        )));
    }
    if n < 100 {
        return Err(Error::Config(format!(
            "interchange_check needs n ≥ 100, got {n}"
        )));
    }
    let perturbed = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut xs = rng::standard_normal(rng, n * d);
        for r in 0..n {
            for i in 0..d {
                xs[r * d + i] = x[i] + sigma * xs[r * d + i];
            }
        }
        xs
    };
    let nf = n as f64;
    let xs = perturbed(rng);
    let diag = {
        let mut out = vec![0.0; n * d];
        let mut shifted = xs.clone();
        for i in 0..d {
            for r in 0..n {
                shifted[r * d + i] = xs[r * d + i] + FD_H;
            }
            let sp = net.score_plain(&shifted, n, None)?;
            for r in 0..n {
                shifted[r * d + i] = xs[r * d + i] - FD_H;
            }
            let sm = net.score_plain(&shifted, n, None)?;
            for r in 0..n {
                shifted[r * d + i] = xs[r * d + i];
                out[r * d + i] = (sp[r * d + i] - sm[r * d + i]) / (2.0 * FD_H);
            }
        }
        out
    };
    let mut row_total = 0.0;
    let mut row_sq = 0.0;
    for r in 0..n {
        let mut rs = 0.0;
        for i in 0..d {
            rs += diag[r * d + i];
        }
        row_total += rs;
        row_sq += rs * rs;
    }
    let expectation_of_sum = row_total / nf;
    let var_sum = (row_sq / nf - expectation_of_sum * expectation_of_sum).max(0.0);
    let se_sum = (var_sum / nf).sqrt();

    let mut sum_of_expectations = 0.0;
    for i in 0..d {
        let mut col = 0.0;
        for r in 0..n {
            col += diag[r * d + i];
        }
        sum_of_expectations += col / nf;
    }
    let crn_discrepancy = (expectation_of_sum - sum_of_expectations).abs();

    let mut independent_total = 0.0;
    let mut independent_var = 0.0;
    for i in 0..d {
        let xs_i = perturbed(rng);
        let mut shifted = xs_i.clone();
        for r in 0..n {
            shifted[r * d + i] = xs_i[r * d + i] + FD_H;
        }
        let sp = net.score_plain(&shifted, n, None)?;
        for r in 0..n {
            shifted[r * d + i] = xs_i[r * d + i] - FD_H;
        }
        let sm = net.score_plain(&shifted, n, None)?;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for r in 0..n {
            let v = (sp[r * d + i] - sm[r * d + i]) / (2.0 * FD_H);
            sum += v;
            sq += v * v;
        }
        let mean = sum / nf;
        let var = (sq / nf - mean * mean).max(0.0);
        independent_total += mean;
        independent_var += var / nf;
    }
    let independent_discrepancy = (expectation_of_sum - independent_total).abs();
    let combined_se = (independent_var + se_sum * se_sum).sqrt();

    Ok(InterchangeReport {
        expectation_of_sum,
        sum_of_expectations,
        crn_discrepancy,
        independent_discrepancy,
        combined_se,
        n,
    })
}

/// Mean squared score-field error over the given points (flattened
/// `[n, dim]`): mean of ‖score(x) − oracle(x)‖² with the oracle widened by
/// `extra_var`.
pub fn score_error(
    mut score: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
    mix: &GaussianMixture,
    points: &[f64],
    extra_var: f64,
) -> Result<f64> {
    let d = mix.dim();
    if points.is_empty() || points.len() % d != 0 {
        return Err(Error::shape("score_error", format!("[n,{d}]"), points.len()));
    }
    let n = points.len() / d;
    let oracle = mix.score_rows(points, extra_var)?;
    let got = score(points, n)?;
    if got.len() != oracle.len() {
        return Err(Error::shape("score_error", oracle.len(), got.len()));
    }
    let mut acc = 0.0;
    for (g, o) in got.iter().zip(&oracle) {
        let diff = g - o;
        acc += diff * diff;
    }
    Ok(acc / n as f64)
}

/// The zero-net reference level: mean ‖oracle‖² over the points.
pub fn zero_net_baseline(
    mix: &GaussianMixture,
    points: &[f64],
    extra_var: f64,
) -> Result<f64> {
    score_error(|rows, _| Ok(vec![0.0; rows.len()]), mix, points, extra_var)
}

/// 2-D histogram over a square window, rows stored top-first (row 0 holds
/// the largest x₂ values).
#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub fn density_grid(points: &[f64], lo: f64, hi: f64, bins: usize) -> Result<DensityGrid> {
    if bins < 2 {
        return Err(Error::Config(format!("density_grid needs ≥ 2 bins, got {bins}")));
    }
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "density_grid needs hi > lo, got [{lo}, {hi}]"
        )));
    }
    if points.len() % 2 != 0 {
        return Err(Error::shape("density_grid", "[n,2]", points.len()));
    }
    let mut counts = vec![0u64; bins * bins];
    let width = hi - lo;
    for p in points.chunks_exact(2) {
        if p[0] < lo || p[0] >= hi || p[1] < lo || p[1] >= hi {
            continue;
        }
        let col = ((p[0] - lo) / width * bins as f64) as usize;
        let row_up = ((p[1] - lo) / width * bins as f64) as usize;
        let col = col.min(bins - 1);
        let row = bins - 1 - row_up.min(bins - 1);
        counts[row * bins + col] += 1;
    }
    Ok(DensityGrid {
        bins,
        lo,
        hi,
        counts,
    })
}

/// Binary PGM: `P5\n<w> <h>\n255\n` then one byte per cell, counts scaled
/// to 0..=255 by the maximum (all zero when the grid is empty).
pub fn write_pgm(grid: &DensityGrid, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", grid.bins, grid.bins)?;
    let max = grid.counts.iter().copied().max().unwrap_or(0);
    let bytes: Vec<u8> = grid
        .counts
        .iter()
        .map(|&c| {
            if max == 0 {
                0u8
            } else {
                ((c as f64 / max as f64) * 255.0).round() as u8
            }
        })
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Raw counts as CSV with bin indices increasing in x₁ and x₂.
pub fn write_counts_csv(grid: &DensityGrid, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "x1_bin,x2_bin,count")?;
    for row in 0..grid.bins {
        for col in 0..grid.bins {
            let x2_bin = grid.bins - 1 - row;
            writeln!(w, "{col},{x2_bin},{}", grid.counts[row * grid.bins + col])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock per-optimization-step timing over a warm window (the first
/// 10% of steps is excluded).
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub method: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Steps in the measured window (after warm-up exclusion).
    pub steps: usize,
}

impl BenchReport {
    /// Coefficient of variation of the per-step time; > 0.25 indicates a
    /// noisy machine and downgrades comparisons to a warning.
    pub fn cov(&self) -> f64 {
        if self.mean_ms > 0.0 {
            self.std_ms / self.mean_ms
        } else {
            0.0
        }
    }
}

/// Times full optimization steps (loss, gradients, update) of the given
/// objective on pre-generated data. Data slicing happens before the timed
/// region.
pub fn bench(
    net: &mut ScoreNet,
    spec: &ObjectiveSpec,
    data: &[f64],
    batch: usize,
    steps: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BenchReport> {
    let d = net.config.input_dim;
    if batch == 0 || data.len() < batch * d {
        return Err(Error::Config(format!(
            "bench needs at least {} data values for batch {batch}",
            batch * d
        )));
    }
    let warmup = steps / 10;
    if steps - warmup < 100 {
        return Err(Error::Config(format!(
            "bench needs ≥ 100 measured steps after 10% warm-up, got {steps} total"
        )));
    }
    let rows = data.len() / d;
    let nbatches = (rows / batch).max(1).min(steps);
    let mut batches = Vec::with_capacity(nbatches);
    for b in 0..nbatches {
        let start = b * batch * d;
        batches.push(Tensor::matrix(batch, d, data[start..start + batch * d].to_vec())?);
    }
    let mut times_ms = Vec::with_capacity(steps);
    for step in 0..steps {
        let x0 = &batches[step % nbatches];
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let loss = match spec.kind {
            ObjectiveKind::Sm | ObjectiveKind::LcsExact => {
                let mut acc: Option<Tensor> = None;
                for r in 0..batch {
                    let row = Tensor::vector(&x0.data()[r * d..(r + 1) * d]);
                    let li = match spec.kind {
                        ObjectiveKind::Sm => objectives::sm_exact(&mut tape, &bound, &row)?,
                        _ => objectives::lcs_exact(&mut tape, &bound, &row, spec.sigma)?,
                    };
                    acc = Some(match acc {
                        None => li,
                        Some(a) => tape.add(&a, &li)?,
                    });
                }
                tape.scale(&acc.expect("batch ≥ 1"), 1.0 / batch as f64)?
            }
            _ => objectives::batch_loss(&mut tape, &bound, x0, spec, rng)?,
        };
        let grads = bound.grads_flat(&mut tape, &loss)?;
        drop(tape);
        net.sgd_step(&grads, lr)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let window = &times_ms[warmup..];
    let nf = window.len() as f64;
    let mean = window.iter().sum::<f64>() / nf;
    let var = window.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (nf - 1.0);
    Ok(BenchReport {
        method: spec.kind.name().to_string(),
        mean_ms: mean,
        std_ms: var.sqrt(),
        steps: window.len(),
    })
}

/// Writes bench rows as CSV with exactly the four contract columns.
pub fn write_bench_csv(reports: &[BenchReport], path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "method,mean_ms,std_ms,steps")?;
    for r in reports {
        writeln!(w, "{},{:.6},{:.6},{}", r.method, r.mean_ms, r.std_ms, r.steps)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, MlpConfig, NetMode};
    use crate::rng::{stream_rng, streams};

    fn linear_net(d: usize, w: &[f64], b: &[f64]) -> ScoreNet {
        let config = MlpConfig {
            input_dim: d,
            hidden: vec![],
            activation: Activation::Tanh,
            output_dim: d,
            time_conditional: false,
        };
        let mut net = ScoreNet::init(config, NetMode::Score, 0).unwrap();
        let params = net.params_mut();
        params[..d * d].copy_from_slice(w);
        params[d * d..].copy_from_slice(b);
        net
    }

    fn mlp_net(d: usize, hidden: &[usize], seed: u64) -> ScoreNet {
        let config = MlpConfig {
            input_dim: d,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
            output_dim: d,
            time_conditional: false,
        };
        ScoreNet::init(config, NetMode::Score, seed).unwrap()
    }

    #[test]
    fn stein_identity_function_example() {
        let d = 2usize;
        let f = SteinFn::new(
            d,
            |x: &[f64], _| x.to_vec(),
            move |x: &[f64], _| vec![1.0; x.len()],
        );
        let mut rng = stream_rng(1, streams::EVAL);
        let report = stein_check(&f, &[0.3, -0.7], 1.3, 100_000, &mut rng).unwrap();
        for i in 0..d {
            assert_eq!(report.rhs[i], 1.0);
            assert!((report.lhs[i] - 1.0).abs() < 0.05, "lhs {:?}", report.lhs);
        }
        assert!(report.max_standardized < 4.0, "{}", report.max_standardized);
    }

    #[test]
    fn stein_square_function_example() {
        let f = SteinFn::new(
            1,
            |x: &[f64], _| x.iter().map(|v| v * v).collect(),
            |x: &[f64], _| x.iter().map(|v| 2.0 * v).collect(),
        );
        let mut rng = stream_rng(2, streams::EVAL);
        let report = stein_check(&f, &[1.0], 1.0, 1_000_000, &mut rng).unwrap();
        assert!((report.lhs[0] - 2.0).abs() < 0.05, "lhs {}", report.lhs[0]);
        assert!((report.rhs[0] - 2.0).abs() < 0.05, "rhs {}", report.rhs[0]);
        assert!(report.max_standardized < 4.0, "{}", report.max_standardized);
    }

    #[test]
    fn stein_mlp_passes() {
        let net = mlp_net(2, &[8], 11);
        let f = SteinFn::from_net(&net).unwrap();
        let mut rng = stream_rng(3, streams::EVAL);
        let report = stein_check(&f, &[0.0, 0.0], 1.0, 100_000, &mut rng).unwrap();
        assert!(report.max_standardized < 4.0, "{}", report.max_standardized);
    }

    #[test]
    fn stein_cubic_polynomials_pass() {
        for (case, coeffs) in [
            [0.5, -1.0, 0.3, 0.2],
            [0.0, 2.0, -0.5, 0.1],
            [1.0, 0.0, 1.0, -0.3],
            [-0.7, 0.4, 0.0, 0.25],
        ]
        .iter()
        .enumerate()
        {
            let [c0, c1, c2, c3] = *coeffs;
            let f = SteinFn::new(
                2,
                move |x: &[f64], _| {
                    x.iter()
                        .map(|&v| c0 + c1 * v + c2 * v * v + c3 * v * v * v)
                        .collect()
                },
                move |x: &[f64], _| {
                    x.iter()
                        .map(|&v| c1 + 2.0 * c2 * v + 3.0 * c3 * v * v)
                        .collect()
                },
            );
            let mut rng = stream_rng(4 + case as u64, streams::EVAL);
            let report = stein_check(&f, &[0.2, -0.1], 0.8, 100_000, &mut rng).unwrap();
            assert!(
                report.max_standardized < 4.0,
                "case {case}: {}",
                report.max_standardized
            );
        }
    }

    #[test]
    fn stein_rejects_small_n() {
        let f = SteinFn::new(1, |x: &[f64], _| x.to_vec(), |x: &[f64], _| {
            vec![1.0; x.len()]
        });
        let mut rng = stream_rng(0, streams::EVAL);
        assert!(stein_check(&f, &[0.0], 1.0, 50, &mut rng).is_err());
    }

    #[test]
    fn trace_convergence_linear_net() {
        let net = linear_net(2, &[-1.0, 0.3, 0.7, -2.0], &[0.1, -0.2]);
        let mut rng = stream_rng(5, streams::EVAL);
        let report = lcss_trace_convergence(
            &net,
            &[0.5, -0.3],
            0.5,
            &[100, 1_000, 10_000],
            48,
            &mut rng,
        )
        .unwrap();
        assert!(
            (report.reference + 3.0).abs() < 1e-9,
            "reference {}",
            report.reference
        );
        assert!(
            (-0.65..=-0.35).contains(&report.slope),
            "slope {}",
            report.slope
        );
        assert!(report.rms[0] > report.rms[2]);
    }

    #[test]
    fn trace_convergence_constant_net() {
        let net = linear_net(2, &[0.0; 4], &[0.7, -0.4]);
        let mut rng = stream_rng(6, streams::EVAL);
        let report = lcss_trace_convergence(
            &net,
            &[0.0, 0.0],
            0.5,
            &[100, 1_000, 10_000],
            48,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.reference, 0.0);
        let sd = (0.7f64 * 0.7 + 0.4 * 0.4).sqrt() / 0.5;
        for (&n, &r) in report.ns.iter().zip(&report.rms) {
            assert!(
                r <= 5.0 * sd / (n as f64).sqrt(),
                "rms {r} at N={n} too large"
            );
        }
        assert!(
            (-0.65..=-0.35).contains(&report.slope),
            "slope {}",
            report.slope
        );
    }

    #[test]
    fn trace_estimate_matches_exact_trace_at_small_sigma() {
        let net = mlp_net(2, &[8], 7);
        let x = [0.3, -0.4];
        let exact = exact_trace(&net, &x).unwrap();
        let mut rng = stream_rng(7, streams::EVAL);
        let (est, se) = trace_estimate(&net, &x, 0.01, 10_000, &mut rng).unwrap();
        assert!(
            (est - exact).abs() <= 3.0 * se,
            "estimate {est} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn exact_trace_matches_fd() {
        let net = mlp_net(2, &[7], 9);
        let x = [0.15, 0.6];
        let exact = exact_trace(&net, &x).unwrap();
        let fd = fd_traces(&net, &x, 1, 2).unwrap()[0];
        assert!(
            (exact - fd).abs() <= 1e-6 * fd.abs().max(1.0),
            "{exact} vs {fd}"
        );
    }

    #[test]
    fn interchange_linear_net_equals_trace() {
        let net = linear_net(2, &[-1.0, 0.0, 0.0, -0.5], &[0.0, 0.0]);
        let mut rng = stream_rng(8, streams::EVAL);
        let report = interchange_check(&net, &[0.0, 0.0], 0.5, 5_000, &mut rng).unwrap();
        assert!(
            (report.expectation_of_sum + 1.5).abs() < 1e-9,
            "{}",
            report.expectation_of_sum
        );
        assert!(
            report.crn_discrepancy <= 1e-10,
            "crn {}",
            report.crn_discrepancy
        );
    }

    #[test]
    fn interchange_mlp_independent_streams_within_se() {
        let net = mlp_net(2, &[8], 13);
        let mut rng = stream_rng(9, streams::EVAL);
        let report = interchange_check(&net, &[0.2, 0.1], 0.3, 20_000, &mut rng).unwrap();
        assert!(
            report.crn_discrepancy
                <= 1e-10 * report.expectation_of_sum.abs().max(1.0),
            "crn {}",
            report.crn_discrepancy
        );
        assert!(
            report.independent_discrepancy < 4.0 * report.combined_se,
            "independent {} vs 4se {}",
            report.independent_discrepancy,
            4.0 * report.combined_se
        );
    }

    #[test]
    fn score_error_oracle_wrapper_is_zero() {
        let mix = GaussianMixture::ring8();
        let mut rng = stream_rng(10, streams::DATA);
        let pts = mix.sample(500, &mut rng);
        let err = score_error(
            |rows, _| mix.score_rows(rows, 0.0),
            &mix,
            &pts,
            0.0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn score_error_zero_net_matches_baseline() {
        let mix = GaussianMixture::ring8();
        let mut rng = stream_rng(11, streams::DATA);
        let pts = mix.sample(400, &mut rng);
        let baseline = zero_net_baseline(&mix, &pts, 0.2).unwrap();
        let mut direct = 0.0;
        for p in pts.chunks_exact(2) {
            let s = mix.score(p, 0.2).unwrap();
            direct += s[0] * s[0] + s[1] * s[1];
        }
        direct /= 400.0;
        assert!(
            (baseline - direct).abs() <= 1e-12 * direct.max(1.0),
            "{baseline} vs {direct}"
        );
        assert!(baseline > 0.0);
    }

    #[test]
    fn density_grid_single_cell() {
        let pts = vec![0.5, 0.5].repeat(10);
        let grid = density_grid(&pts, -4.0, 4.0, 8).unwrap();
        assert_eq!(grid.counts.iter().sum::<u64>(), 10);
        let dir = std::env::temp_dir().join("smlab-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("single.pgm");
        write_pgm(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        let pixels = &bytes[11..];
        assert_eq!(pixels.len(), 64);
        assert_eq!(pixels.iter().filter(|&&b| b == 255).count(), 1);
        assert_eq!(pixels.iter().filter(|&&b| b == 0).count(), 63);
        let row = 8 - 1 - (((0.5 + 4.0) / 8.0 * 8.0) as usize);
        let col = ((0.5 + 4.0) / 8.0 * 8.0) as usize;
        assert_eq!(pixels[row * 8 + col], 255);
    }

    #[test]
    fn density_grid_uniform_counts() {
        let n = 1_000_000usize;
        let mut rng = stream_rng(12, streams::DATA);
        let pts = rng::uniform(&mut rng, 2 * n, -4.0, 4.0);
        let bins = 10usize;
        let grid = density_grid(&pts, -4.0, 4.0, bins).unwrap();
        let expect = n as f64 / (bins * bins) as f64;
        let sd = (expect * (1.0 - 1.0 / (bins * bins) as f64)).sqrt();
        for (i, &c) in grid.counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 5.0 * sd,
                "cell {i}: {c} vs {expect}"
            );
        }
    }

    #[test]
    fn density_grid_empty_input() {
        let grid = density_grid(&[], -4.0, 4.0, 4).unwrap();
        assert!(grid.counts.iter().all(|&c| c == 0));
        let dir = std::env::temp_dir().join("smlab-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.pgm");
        write_pgm(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
    }

    #[test]
    fn density_grid_rejects_bad_config() {
        assert!(density_grid(&[], -4.0, 4.0, 1).is_err());
        assert!(density_grid(&[], 4.0, 4.0, 8).is_err());
    }

    #[test]
    fn counts_csv_lists_every_cell() {
        let grid = density_grid(&[0.0, 0.0], -1.0, 1.0, 2).unwrap();
        let dir = std::env::temp_dir().join("smlab-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("counts.csv");
        write_counts_csv(&grid, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1_bin,x2_bin,count");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines.contains(&"1,1,1"));
    }

    #[test]
    fn bench_reports_warm_window() {
        let mut net = mlp_net(2, &[8], 15);
        let mut rng = stream_rng(13, streams::DATA);
        let data = rng::standard_normal(&mut rng, 256 * 2);
        let spec = ObjectiveSpec::new(ObjectiveKind::Lcss);
        let mut brng = stream_rng(13, streams::NOISE);
        let report = bench(&mut net, &spec, &data, 128, 120, 1e-3, &mut brng).unwrap();
        assert_eq!(report.method, "lcss");
        assert_eq!(report.steps, 108);
        assert!(report.mean_ms > 0.0);
        assert!(report.std_ms.is_finite());
        assert!(report.cov() >= 0.0);
    }

    #[test]
    fn bench_rejects_short_runs() {
        let mut net = mlp_net(2, &[4], 15);
        let mut rng = stream_rng(13, streams::DATA);
        let data = rng::standard_normal(&mut rng, 64 * 2);
        let spec = ObjectiveSpec::new(ObjectiveKind::Lcss);
        let mut brng = stream_rng(13, streams::NOISE);
        assert!(bench(&mut net, &spec, &data, 32, 100, 1e-3, &mut brng).is_err());
    }

    #[test]
    fn bench_batch_scaling_stays_subquadratic() {
        let spec = ObjectiveSpec::new(ObjectiveKind::Lcss);
        let mut rng = stream_rng(14, streams::DATA);
        let data = rng::standard_normal(&mut rng, 512 * 2);
        let time_at = |batch: usize| {
            let mut net = mlp_net(2, &[16], 17);
            let mut brng = stream_rng(14, streams::NOISE);
            bench(&mut net, &spec, &data, batch, 112, 1e-3, &mut brng)
                .unwrap()
                .mean_ms
        };
        let t128 = time_at(128);
        let t256 = time_at(256);
        assert!(
            t256 / t128 < 4.0,
            "doubling batch scaled {t128} -> {t256}"
        );
    }

    #[test]
    fn bench_csv_has_four_columns() {
        let reports = vec![
            BenchReport {
                method: "lcss".into(),
                mean_ms: 1.25,
                std_ms: 0.1,
                steps: 108,
            },
            BenchReport {
                method: "dsm".into(),
                mean_ms: 1.5,
                std_ms: 0.2,
                steps: 108,
            },
        ];
        let dir = std::env::temp_dir().join("smlab-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bench.csv");
        write_bench_csv(&reports, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,mean_ms,std_ms,steps");
        assert_eq!(lines.len(), 3);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 4);
        }
    }
}
