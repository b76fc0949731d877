//! Forward diffusion schedules and reverse-time samplers.
//!
//! Two schedules are provided: variance-exploding (VE), where noise is added
//! without contraction, and sub-variance-preserving (SubVP), where a linear
//! β(t) ramp contracts the state while injecting noise. Both expose the
//! pieces the objectives and samplers need — drift `f(x,t)`, diffusion
//! `g(t)`, the marginal standard deviation `σ_t`, forward perturbation,
//! prior sampling — plus the loss weighting `λ(t)` chosen so that
//! `λ(t)/σ_t²` is exact in closed form.
//!
//! Samplers: reverse-time Euler–Maruyama over the schedule, and (annealed)
//! Langevin dynamics for fixed-noise models. Both advance a whole batch of
//! chains synchronously, one score evaluation per step.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Lower integration cutoff: times below this are outside the supported
/// interval because `σ_t → 0` makes the weighting singular.
pub const T_MIN: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdeKind {
    Ve,
    SubVp,
}

/// An SDE noise schedule on `t ∈ [0, T]`, `T = 1`.
///
/// Immutable and `Copy`: clone freely across threads; each sampling chain
/// owns its RNG.
#[derive(Clone, Copy, Debug)]
pub struct SdeSchedule {
    pub kind: SdeKind,
    sigma_min: f64,
    sigma_max: f64,
    beta_min: f64,
    beta_max: f64,
    horizon: f64,
}

impl SdeSchedule {
    /// Variance-exploding schedule with the published defaults
    /// σ ∈ [0.01, 50].
    pub fn ve() -> Self {
        Self::ve_with(0.01, 50.0).unwrap()
    }

    pub fn ve_with(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_max > sigma_min && sigma_min > 0.0) {
            return Err(Error::Config(format!(
                "VE schedule needs sigma_max > sigma_min > 0, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(SdeSchedule {
            kind: SdeKind::Ve,
            sigma_min,
            sigma_max,
            beta_min: 0.0,
            beta_max: 0.0,
            horizon: 1.0,
        })
    }

    /// Sub-variance-preserving schedule with the published defaults
    /// β ∈ [0.1, 20].
    pub fn subvp() -> Self {
        Self::subvp_with(0.1, 20.0).unwrap()
    }

    pub fn subvp_with(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_max > beta_min && beta_min > 0.0) {
            return Err(Error::Config(format!(
                "SubVP schedule needs beta_max > beta_min > 0, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(SdeSchedule {
            kind: SdeKind::SubVp,
            sigma_min: 0.0,
            sigma_max: 0.0,
            beta_min,
            beta_max,
            horizon: 1.0,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_t(&self, t: f64, lo: f64) -> Result<()> {
        if !(t >= lo && t <= self.horizon) {
            return Err(Error::TimeOutOfRange {
                t,
                lo,
                hi: self.horizon,
            });
        }
        Ok(())
    }

    fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// ∫₀ᵗ β(s) ds for the linear ramp, in closed form.
    fn int_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Forward drift f(x, t). VE: zero. SubVP: −½β(t)·x. Affine in x for
    /// both schedules.
    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_t(t, 0.0)?;
        match self.kind {
            SdeKind::Ve => Ok(vec![0.0; x.len()]),
            SdeKind::SubVp => {
                let c = -0.5 * self.beta(t);
                Ok(x.iter().map(|&v| c * v).collect())
            }
        }
    }

    /// Diffusion coefficient g(t).
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.check_t(t, 0.0)?;
        Ok(match self.kind {
            SdeKind::Ve => {
                let ratio = self.sigma_max / self.sigma_min;
                self.sigma_min * ratio.powf(t) * (2.0 * ratio.ln()).sqrt()
            }
            SdeKind::SubVp => {
                let b = self.beta(t);
                (b * (1.0 - (-2.0 * self.int_beta(t)).exp())).sqrt()
            }
        })
    }

    /// Marginal perturbation standard deviation σ_t. VE:
    /// σ_min(σ_max/σ_min)ᵗ; SubVP: 1 − e^{−∫₀ᵗβ}. Strictly increasing;
    /// `t ≤ 0` is out of support (callers clamp to [`T_MIN`]).
    pub fn marginal_std(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(Error::TimeOutOfRange {
                t,
                lo: T_MIN,
                hi: self.horizon,
            });
        }
        self.check_t(t, 0.0)?;
        Ok(match self.kind {
            SdeKind::Ve => self.sigma_min * (self.sigma_max / self.sigma_min).powf(t),
            SdeKind::SubVp => 1.0 - (-self.int_beta(t)).exp(),
        })
    }

    /// Loss weighting λ(t): g(t)² for VE (where it equals 2 ln(σ_max/σ_min)
    /// ·σ_t²), σ_t² for SubVP — in both cases λ(t)/σ_t² is exact, see
    /// [`SdeSchedule::weight_over_sigma_sq`].
    pub fn lambda(&self, t: f64) -> Result<f64> {
        let sigma = self.marginal_std(t)?;
        Ok(self.weight_over_sigma_sq() * sigma * sigma)
    }

    /// λ(t)/σ_t² in closed form: 2 ln(σ_max/σ_min) for VE, 1 for SubVP.
    /// This ratio is what the time-dependent objectives multiply by, so the
    /// σ_t² denominator never appears numerically.
    pub fn weight_over_sigma_sq(&self) -> f64 {
        match self.kind {
            SdeKind::Ve => 2.0 * (self.sigma_max / self.sigma_min).ln(),
            SdeKind::SubVp => 1.0,
        }
    }

    /// Forward perturbation: x0 + σ_t·z with z ∼ N(0, I).
    pub fn perturb(&self, x0: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.check_t(t, T_MIN)?;
        let sigma = self.marginal_std(t)?;
        let z = rng::standard_normal(rng, x0.len());
        Ok(x0.iter().zip(&z).map(|(&x, &n)| x + sigma * n).collect())
    }

    /// One draw from the terminal prior: VE N(0, σ_max² I), SubVP N(0, I).
    pub fn prior_sample(&self, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let scale = match self.kind {
            SdeKind::Ve => self.sigma_max,
            SdeKind::SubVp => 1.0,
        };
        rng::standard_normal(rng, d).into_iter().map(|z| scale * z).collect()
    }

    /// Standardized log-σ time feature: affine map of ln σ_t sending
    /// [T_MIN, T] onto [−0.5, 0.5]. What time-conditional networks consume.
    pub fn time_feature(&self, t: f64) -> Result<f64> {
        let lo = self.marginal_std(T_MIN)?.ln();
        let hi = self.marginal_std(self.horizon)?.ln();
        let mid = 0.5 * (lo + hi);
        Ok((self.marginal_std(t)?.ln() - mid) / (hi - lo))
    }

    /// Inverts [`SdeSchedule::time_feature`]: the marginal σ a feature value
    /// encodes. Conditional networks divide their raw output by this σ, so
    /// the head learns the O(1) quantity σ_t·∇log p_t at every slice — and,
    /// because the λ(t) = g(t)² loss weighting is exactly σ_t² times the
    /// objectives' 1/σ_t² factors, every slice also trains at the same
    /// net-space rate.
    pub fn sigma_from_feature(&self, f: f64) -> Result<f64> {
        let lo = self.marginal_std(T_MIN)?.ln();
        let hi = self.marginal_std(self.horizon)?.ln();
        Ok((f * (hi - lo) + 0.5 * (lo + hi)).exp())
    }

    /// Input preconditioning scale 1/√(1 + σ²) for the σ a feature value
    /// encodes. Conditional networks multiply x by it before the first
    /// layer: perturbed inputs have variance ≈ Var(x₀) + σ_t², so without it
    /// the layer would see magnitudes spanning the whole σ range — and
    /// gradient scales, and stable step sizes, to match.
    pub fn input_scale_from_feature(&self, f: f64) -> Result<f64> {
        let sigma = self.sigma_from_feature(f)?;
        Ok(1.0 / (1.0 + sigma * sigma).sqrt())
    }
}

/// Sampler settings shared by the command-line tools.
#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub langevin_eps: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be ≥ 1".into()));
        }
        if !(self.langevin_eps > 0.0) {
            return Err(Error::Config("langevin_eps must be > 0".into()));
        }
        Ok(())
    }
}

fn check_finite_rows(x: &[f64], d: usize, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let _ = d;
    Err(Error::Diverged { step })
}

/// Reverse-time Euler–Maruyama from `T` down to [`T_MIN`] with uniform Δt.
///
/// `x` holds a batch of chains as row-major `[B, d]`; `score` receives the
/// whole batch and the current time and returns the score field row-wise
/// (a single chain is the `B = 1` case). `noise_scale` multiplies the
/// injected noise — 1 is the SDE, 0 gives the deterministic drift-plus-score
/// flow (useful for pinning tests).
///
/// The update per step at time t, moving backward by Δt:
/// x ← x − Δt·[f(x,t) − g(t)²·s(x,t)] + g(t)·√Δt·noise_scale·z.
pub fn reverse_em<F>(
    schedule: &SdeSchedule,
    mut score: F,
    mut x: Vec<f64>,
    d: usize,
    steps: usize,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps < 1 {
        return Err(Error::Config("reverse_em needs steps ≥ 1".into()));
    }
    if d == 0 || x.len() % d != 0 {
        return Err(Error::shape("reverse_em", format!("[B,{d}]"), x.len()));
    }
    let t_end = schedule.horizon();
    let dt = (t_end - T_MIN) / steps as f64;
    for step in 0..steps {
        let t = t_end - step as f64 * dt;
        let s = score(&x, t)?;
        if s.len() != x.len() {
            return Err(Error::shape("reverse_em score", x.len(), s.len()));
        }
        let f = schedule.drift(&x, t)?;
        let g = schedule.diffusion(t)?;
        let g2 = g * g;
        let noise_sd = g * dt.sqrt() * noise_scale;
        let z = if noise_sd != 0.0 {
            rng::standard_normal(rng, x.len())
        } else {
            Vec::new()
        };
        for i in 0..x.len() {
            let mut v = x[i] - dt * (f[i] - g2 * s[i]);
            if noise_sd != 0.0 {
                v += noise_sd * z[i];
            }
            x[i] = v;
        }
        check_finite_rows(&x, d, step)?;
    }
    Ok(x)
}

/// Langevin dynamics: x ← x + (ε/2)·s(x) + z with z ∼ N(0, εI), iterated
/// `steps` times over a batch `[B, d]` of chains.
///
/// A chain whose norm exceeds 1e6 reports divergence with the step index.
/// `eps = 0` degenerates to the identity map (the noise has zero variance).
pub fn langevin<F>(
    mut score: F,
    mut x: Vec<f64>,
    d: usize,
    eps: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if d == 0 || x.len() % d != 0 {
        return Err(Error::shape("langevin", format!("[B,{d}]"), x.len()));
    }
    if eps < 0.0 {
        return Err(Error::Config("langevin eps must be ≥ 0".into()));
    }
    let half = 0.5 * eps;
    let sd = eps.sqrt();
    for step in 0..steps {
        let s = score(&x)?;
        if s.len() != x.len() {
            return Err(Error::shape("langevin score", x.len(), s.len()));
        }
        let z = rng::standard_normal(rng, x.len());
        for i in 0..x.len() {
            x[i] += half * s[i] + sd * z[i];
        }
        for (row, chunk) in x.chunks_exact(d).enumerate() {
            let n2: f64 = chunk.iter().map(|v| v * v).sum();
            if !n2.is_finite() || n2 > 1e12 {
                let _ = row;
                return Err(Error::Diverged { step });
            }
        }
    }
    Ok(x)
}

/// Annealed Langevin: runs [`langevin`] once per noise level, passing the
/// level's σ to the score and scaling the step size by (σ_i/σ_last)².
/// Provided as a refinement; the plain fixed-ε chain is the reference path.
pub fn annealed_langevin<F>(
    mut score: F,
    mut x: Vec<f64>,
    d: usize,
    sigmas: &[f64],
    eps: f64,
    steps_per_level: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let Some(&sigma_last) = sigmas.last() else {
        return Err(Error::Config("annealed_langevin needs ≥ 1 noise level".into()));
    };
    for &sigma in sigmas {
        let ratio = sigma / sigma_last;
        let level_eps = eps * ratio * ratio;
        x = langevin(|xs| score(xs, sigma), x, d, level_eps, steps_per_level, rng)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, streams};

    #[test]
    fn ve_drift_is_zero() {
        let ve = SdeSchedule::ve();
        let f = ve.drift(&[3.0, -2.0], 0.7).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
    }

    #[test]
    fn subvp_drift_matches_closed_form() {
        // β(t) = 0.1 at t = 0 for the default ramp; x = (2, 0) → (−0.1, 0).
        let sv = SdeSchedule::subvp();
        let f = sv.drift(&[2.0, 0.0], 0.0).unwrap();
        assert!((f[0] - (-0.1)).abs() < 1e-15);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn drifts_are_affine() {
        for sched in [SdeSchedule::ve(), SdeSchedule::subvp()] {
            let x = [0.4, -1.2, 2.0];
            let y = [1.0, 0.5, -0.25];
            let alpha = 1.7;
            for &t in &[0.0, 0.3, 1.0] {
                let fx = sched.drift(&x, t).unwrap();
                let fy = sched.drift(&y, t).unwrap();
                let mixed: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| alpha * a + b).collect();
                let fmix = sched.drift(&mixed, t).unwrap();
                let f0 = sched.drift(&[0.0, 0.0, 0.0], t).unwrap();
                for i in 0..3 {
                    let lin = alpha * fx[i] + fy[i] - alpha * f0[i];
                    assert!((fmix[i] - lin).abs() < 1e-12, "kind {:?} t {t}", sched.kind);
                }
            }
        }
    }

    #[test]
    fn ve_marginal_hits_endpoints() {
        let ve = SdeSchedule::ve();
        assert!((ve.marginal_std(1.0).unwrap() - 50.0).abs() < 1e-9);
        let near_zero = ve.marginal_std(1e-12).unwrap();
        assert!((near_zero - 0.01).abs() < 1e-6);
        assert!(ve.marginal_std(0.0).is_err());
        assert!(ve.marginal_std(-0.1).is_err());
        assert!(ve.marginal_std(1.5).is_err());
    }

    #[test]
    fn subvp_marginal_saturates_toward_one() {
        let sv = SdeSchedule::subvp();
        let s1 = sv.marginal_std(1.0).unwrap();
        assert!(s1 > 0.9999 && s1 < 1.0);
    }

    #[test]
    fn marginal_std_is_strictly_increasing() {
        for sched in [SdeSchedule::ve(), SdeSchedule::subvp()] {
            let mut prev = 0.0;
            for k in 1..=1000 {
                let t = k as f64 / 1000.0;
                let s = sched.marginal_std(t).unwrap();
                assert!(s > prev, "kind {:?} at t={t}", sched.kind);
                prev = s;
            }
        }
    }

    #[test]
    fn lambda_over_sigma_sq_is_exact() {
        let ve = SdeSchedule::ve();
        for &t in &[1e-5, 0.3, 0.9, 1.0] {
            let sigma = ve.marginal_std(t).unwrap();
            let lam = ve.lambda(t).unwrap();
            let g = ve.diffusion(t).unwrap();
            assert!((lam - g * g).abs() / (g * g) < 1e-12);
            assert_eq!(ve.weight_over_sigma_sq(), lam / (sigma * sigma));
        }
        let sv = SdeSchedule::subvp();
        for &t in &[1e-5, 0.5, 1.0] {
            let sigma = sv.marginal_std(t).unwrap();
            let lam = sv.lambda(t).unwrap();
            assert!((lam - sigma * sigma).abs() <= f64::EPSILON * sigma * sigma);
        }
    }

    #[test]
    fn perturb_with_fixed_seed_is_deterministic_and_centres_on_x0() {
        let ve = SdeSchedule::ve();
        let x0 = [1.5, -0.5];
        let mut r1 = stream_rng(9, streams::NOISE);
        let mut r2 = stream_rng(9, streams::NOISE);
        let a = ve.perturb(&x0, 0.5, &mut r1).unwrap();
        let b = ve.perturb(&x0, 0.5, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_empirical_std_matches_marginal() {
        let ve = SdeSchedule::ve();
        let t = 0.4;
        let sigma = ve.marginal_std(t).unwrap();
        let mut rng = stream_rng(3, streams::NOISE);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = ve.perturb(&[0.0], t, &mut rng).unwrap();
            acc += x[0] * x[0];
        }
        let emp = (acc / n as f64).sqrt();
        assert!(
            (emp - sigma).abs() / sigma < 0.01,
            "empirical {emp} vs σ_t {sigma}"
        );
    }

    #[test]
    fn prior_sample_scales() {
        let ve = SdeSchedule::ve();
        let sv = SdeSchedule::subvp();
        let mut rng = stream_rng(5, streams::SAMPLER);
        let (mut ve_acc, mut sv_acc) = (0.0, 0.0);
        let n = 50_000;
        for _ in 0..n {
            ve_acc += ve.prior_sample(1, &mut rng)[0].powi(2);
            sv_acc += sv.prior_sample(1, &mut rng)[0].powi(2);
        }
        let ve_sd = (ve_acc / n as f64).sqrt();
        let sv_sd = (sv_acc / n as f64).sqrt();
        assert!((ve_sd - 50.0).abs() / 50.0 < 0.02, "VE prior sd {ve_sd}");
        assert!((sv_sd - 1.0).abs() < 0.02, "SubVP prior sd {sv_sd}");
    }

    #[test]
    fn time_feature_spans_half_unit_interval() {
        for sched in [SdeSchedule::ve(), SdeSchedule::subvp()] {
            assert!((sched.time_feature(T_MIN).unwrap() + 0.5).abs() < 1e-9);
            assert!((sched.time_feature(1.0).unwrap() - 0.5).abs() < 1e-9);
            let mid = sched.time_feature(0.5).unwrap();
            assert!(mid > -0.5 && mid < 0.5);
        }
    }

    #[test]
    fn sigma_from_feature_inverts_time_feature() {
        for sched in [SdeSchedule::ve(), SdeSchedule::subvp()] {
            for t in [T_MIN, 1e-3, 0.1, 0.37, 0.8, 1.0] {
                let f = sched.time_feature(t).unwrap();
                let sigma = sched.sigma_from_feature(f).unwrap();
                let expect = sched.marginal_std(t).unwrap();
                assert!(
                    (sigma - expect).abs() / expect < 1e-12,
                    "t={t}: {sigma} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn reverse_em_identity_under_zero_score_zero_noise() {
        let ve = SdeSchedule::ve();
        let mut rng = stream_rng(1, streams::SAMPLER);
        let x_t = vec![0.7, -0.3, 2.5, 0.0];
        let out = reverse_em(
            &ve,
            |x, _| Ok(vec![0.0; x.len()]),
            x_t.clone(),
            2,
            50,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out, x_t);
    }

    #[test]
    fn reverse_em_recovers_gaussian_moments() {
        // Target N(0, I) under VE: perturbed marginal N(0, (1+σ_t²)I), exact
        // time-conditional score s(x,t) = −x/(1+σ_t²).
        let ve = SdeSchedule::ve();
        let mut rng = stream_rng(12, streams::SAMPLER);
        let chains = 10_000usize;
        let d = 2usize;
        let mut x_t = Vec::with_capacity(chains * d);
        for _ in 0..chains {
            x_t.extend(ve.prior_sample(d, &mut rng));
        }
        let out = reverse_em(
            &ve,
            |x, t| {
                let s2 = 1.0 + ve.marginal_std(t).unwrap().powi(2);
                Ok(x.iter().map(|&v| -v / s2).collect())
            },
            x_t,
            d,
            500,
            1.0,
            &mut rng,
        )
        .unwrap();
        let n = (chains * d) as f64;
        let mean: f64 = out.iter().sum::<f64>() / n;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn reverse_em_reports_divergence_step() {
        let ve = SdeSchedule::ve();
        let mut rng = stream_rng(2, streams::SAMPLER);
        let err = reverse_em(
            &ve,
            |x, _| Ok(x.iter().map(|_| f64::INFINITY).collect()),
            vec![0.0, 0.0],
            2,
            10,
            0.0,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0 }));
    }

    #[test]
    fn langevin_standard_normal_reaches_stationary_variance() {
        // s(x) = −x with ε = 0.1 is an AR(1) chain with stationary variance
        // 1/(1 − ε/4) ≈ 1.0256.
        let mut rng = stream_rng(7, streams::SAMPLER);
        let chains = 10_000usize;
        let x0 = crate::rng::uniform(&mut rng, chains, -4.0, 4.0);
        let out = langevin(
            |x| Ok(x.iter().map(|&v| -v).collect()),
            x0,
            1,
            0.1,
            1000,
            &mut rng,
        )
        .unwrap();
        let n = chains as f64;
        let mean: f64 = out.iter().sum::<f64>() / n;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        let target = 1.0 / (1.0 - 0.1 / 4.0);
        assert!(
            (var - target).abs() / target < 0.10,
            "variance {var} vs stationary {target}"
        );
    }

    #[test]
    fn langevin_zero_score_is_a_random_walk() {
        let mut rng = stream_rng(8, streams::SAMPLER);
        let chains = 10_000usize;
        let steps = 100usize;
        let eps = 0.05;
        let out = langevin(
            |x| Ok(vec![0.0; x.len()]),
            vec![0.0; chains],
            1,
            eps,
            steps,
            &mut rng,
        )
        .unwrap();
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / chains as f64;
        let expect = eps * steps as f64;
        assert!(
            (var - expect).abs() / expect < 0.05,
            "variance {var} vs ε·steps {expect}"
        );
    }

    #[test]
    fn langevin_zero_eps_never_moves() {
        let mut rng = stream_rng(9, streams::SAMPLER);
        let x0 = vec![1.0, -2.0, 0.5, 3.0];
        let out = langevin(|x| Ok(x.to_vec()), x0.clone(), 2, 0.0, 25, &mut rng).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn langevin_divergence_is_reported() {
        let mut rng = stream_rng(10, streams::SAMPLER);
        let err = langevin(
            |x| Ok(x.iter().map(|_| 1e9).collect()),
            vec![0.0, 0.0],
            2,
            0.1,
            100,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn annealed_langevin_runs_level_schedule() {
        let mut rng = stream_rng(11, streams::SAMPLER);
        let mut seen = Vec::new();
        let out = annealed_langevin(
            |x, sigma| {
                if !seen.contains(&sigma.to_bits()) {
                    seen.push(sigma.to_bits());
                }
                Ok(x.iter().map(|&v| -v).collect())
            },
            vec![2.0, -2.0],
            1,
            &[1.0, 0.5, 0.1],
            1e-3,
            20,
            &mut rng,
        )
        .unwrap();
        assert_eq!(seen.len(), 3);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampler_config_validation() {
        assert!(SamplerConfig { steps: 0, langevin_eps: 0.1, seed: 0 }.validate().is_err());
        assert!(SamplerConfig { steps: 10, langevin_eps: 0.0, seed: 0 }.validate().is_err());
        assert!(SamplerConfig { steps: 10, langevin_eps: 0.1, seed: 0 }.validate().is_ok());
    }

    #[test]
    fn reverse_em_step_refinement_is_stable() {
        // Halving Δt moves the mean estimate by less than 3× its MC standard
        // error.
        let ve = SdeSchedule::ve();
        let chains = 10_000usize;
        let run = |steps: usize| -> (f64, f64) {
            let mut rng = stream_rng(21, streams::SAMPLER);
            let mut x_t = Vec::with_capacity(chains);
            for _ in 0..chains {
                x_t.extend(ve.prior_sample(1, &mut rng));
            }
            let out = reverse_em(
                &ve,
                |x, t| {
                    let s2 = 1.0 + ve.marginal_std(t).unwrap().powi(2);
                    Ok(x.iter().map(|&v| -v / s2).collect())
                },
                x_t,
                1,
                steps,
                1.0,
                &mut rng,
            )
            .unwrap();
            let n = chains as f64;
            let mean = out.iter().sum::<f64>() / n;
            let var = out.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
            (mean, (var / n).sqrt())
        };
        let (m1, se1) = run(250);
        let (m2, se2) = run(500);
        let se = (se1 * se1 + se2 * se2).sqrt();
        assert!(
            (m1 - m2).abs() < 3.0 * se,
            "Δt halving moved mean {m1} → {m2}, > 3×SE {se}"
        );
    }
}
