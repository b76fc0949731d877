//! The score-matching objectives.
//!
//! Five estimators of the same target, each a scalar tape node
//! differentiable in θ:
//!
//! * [`sm_exact`] — the exact objective Tr(∇ₓs) + ½‖s‖², trace by d backward
//!   passes (low-dimensional validation reference);
//! * [`ssm`] — sliced score matching: the trace replaced by the projected
//!   quadratic form vᵀ(∇ₓs)v, one backward pass;
//! * [`fd_ssm`] — the finite-difference form of SSM: two forward passes,
//!   no second-order differentiation;
//! * [`dsm`] — denoising score matching against the Gaussian kernel score;
//! * [`lcss`] — local curvature smoothing (stochastic): the perturbed
//!   inner-product form whose expectation is [`lcs_exact`].
//!
//! [`sdm_loss`] integrates any of the stochastic objectives over diffusion
//! time with weighting λ(t); the λ(t)/σ_t² ratio is folded in analytically
//! (see [`SdeSchedule::weight_over_sigma_sq`]) so no σ_t division ever
//! happens — the losses stay finite down to t = t_min.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::BoundNet;
use crate::rng;
use crate::sde::{SdeSchedule, T_MIN};
use crate::tensor::{Tape, Tensor};

/// Exact-trace objectives materialize d Jacobian rows; above this dimension
/// they refuse and point callers at the sliced/smoothed estimators.
pub const MAX_EXACT_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Sm,
    Ssm,
    FdSsm,
    Dsm,
    LcsExact,
    Lcss,
    LcssGamma,
}

impl ObjectiveKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "sm" => ObjectiveKind::Sm,
            "ssm" => ObjectiveKind::Ssm,
            "fdssm" | "fd-ssm" => ObjectiveKind::FdSsm,
            "dsm" => ObjectiveKind::Dsm,
            "lcs" | "lcs-exact" => ObjectiveKind::LcsExact,
            "lcss" => ObjectiveKind::Lcss,
            "lcss-gamma" => ObjectiveKind::LcssGamma,
            other => return Err(Error::Config(format!("unknown objective '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Sm => "sm",
            ObjectiveKind::Ssm => "ssm",
            ObjectiveKind::FdSsm => "fdssm",
            ObjectiveKind::Dsm => "dsm",
            ObjectiveKind::LcsExact => "lcs-exact",
            ObjectiveKind::Lcss => "lcss",
            ObjectiveKind::LcssGamma => "lcss-gamma",
        }
    }
}

/// Everything a loss evaluation needs besides the data: noise std, the
/// projection scale for the sliced estimators, the balancing coefficient γ,
/// and the Monte Carlo sample count.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub sigma: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub mc_samples: usize,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveSpec {
            kind,
            sigma: 0.1,
            epsilon: 0.1,
            gamma: 1.0,
            mc_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_sigma = matches!(
            self.kind,
            ObjectiveKind::Dsm | ObjectiveKind::Lcss | ObjectiveKind::LcssGamma
        );
        if needs_sigma && !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "{} needs sigma > 0, got {}",
                self.kind.name(),
                self.sigma
            )));
        }
        if matches!(self.kind, ObjectiveKind::Ssm | ObjectiveKind::FdSsm) && !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "{} needs epsilon > 0, got {}",
                self.kind.name(),
                self.epsilon
            )));
        }
        if self.mc_samples < 1 {
            return Err(Error::Config("mc_samples must be ≥ 1".into()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        Ok(())
    }

    pub fn sampler(&self, d: usize) -> ProjectionSampler {
        ProjectionSampler::rademacher(self.epsilon, d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionDist {
    Rademacher,
    Gaussian,
}

/// Draws projection vectors v with E[vvᵀ] = (ε²/d)·I: per-component scale
/// ε/√d, components Rademacher signs or standard normals.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionSampler {
    pub distribution: ProjectionDist,
    pub scale: f64,
}

impl ProjectionSampler {
    pub fn rademacher(epsilon: f64, d: usize) -> Self {
        ProjectionSampler {
            distribution: ProjectionDist::Rademacher,
            scale: epsilon / (d as f64).sqrt(),
        }
    }

    pub fn gaussian(epsilon: f64, d: usize) -> Self {
        ProjectionSampler {
            distribution: ProjectionDist::Gaussian,
            scale: epsilon / (d as f64).sqrt(),
        }
    }

    /// The ε this sampler realizes in dimension d (scale·√d).
    pub fn epsilon(&self, d: usize) -> f64 {
        self.scale * (d as f64).sqrt()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match self.distribution {
            ProjectionDist::Rademacher => rng::rademacher(rng, n, self.scale),
            ProjectionDist::Gaussian => rng::standard_normal(rng, n)
                .into_iter()
                .map(|z| self.scale * z)
                .collect(),
        }
    }
}

fn require_vector(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape() {
        [d] => Ok(*d),
        other => Err(Error::shape(op, "[d]", other)),
    }
}

fn require_batch(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [b, d] => Ok((*b, *d)),
        other => Err(Error::shape(op, "[B,d]", other)),
    }
}

fn check_exact_dim(d: usize, op: &str) -> Result<()> {
    if d > MAX_EXACT_DIM {
        return Err(Error::ContractViolation(format!(
            "{op} materializes the Jacobian and supports d ≤ {MAX_EXACT_DIM} (got {d}); \
             use lcss or ssm for higher dimensions"
        )));
    }
    Ok(())
}

/// Mean of `terms` as a tape scalar: operands summed in order, one division
/// at the end. Single-draw calls return the term unchanged, which is what
/// makes a k-sample evaluation bit-identical to averaging k single-sample
/// evaluations.
fn mc_mean(tape: &mut Tape, terms: Vec<Tensor>) -> Result<Tensor> {
    let k = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("mc_mean needs ≥ 1 term");
    for t in it {
        acc = tape.add(&acc, &t)?;
    }
    if k > 1 {
        acc = tape.scale(&acc, 1.0 / k as f64)?;
    }
    Ok(acc)
}

/// Exact score matching for one point: Tr(∇ₓ s_θ(x)) + ½‖s_θ(x)‖², the
/// trace assembled from d Jacobian rows.
pub fn sm_exact(tape: &mut Tape, net: &BoundNet, x: &Tensor) -> Result<Tensor> {
    let d = require_vector(x, "sm_exact")?;
    check_exact_dim(d, "sm_exact")?;
    let x_on = tape.ensure(x)?;
    let s = net.forward(tape, &x_on, None)?;
    let mut trace: Option<Tensor> = None;
    for i in 0..d {
        let row = tape.jacobian_row(&s, i, &x_on)?;
        let diag = tape.slice(&row, i, i + 1)?;
        let diag = tape.sum(&diag)?;
        trace = Some(match trace {
            None => diag,
            Some(acc) => tape.add(&acc, &diag)?,
        });
    }
    let norm = tape.sqnorm(&s)?;
    let half_norm = tape.scale(&norm, 0.5)?;
    tape.add(&trace.expect("d ≥ 1"), &half_norm)
}

/// The two SSM terms for one explicit projection v:
/// ((1/ε²)·vᵀ(∇ₓs)v, (1/2d)·‖s‖²). The quadratic form is v·backward(⟨s,v⟩)
/// — the Jacobian is never materialized.
pub fn ssm_parts(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    v: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    let d = require_vector(x, "ssm")?;
    let x_on = tape.ensure(x)?;
    let v_on = tape.ensure(v)?;
    let s = net.forward(tape, &x_on, None)?;
    let sv = tape.inner(&s, &v_on)?;
    let jv = tape.backward(&sv, &[&x_on])?.remove(0);
    let quad = tape.inner(&v_on, &jv)?;
    let term1 = tape.scale(&quad, 1.0 / (epsilon * epsilon))?;
    let norm = tape.sqnorm(&s)?;
    let term2 = tape.scale(&norm, 1.0 / (2.0 * d as f64))?;
    Ok((term1, term2))
}

/// Sliced score matching, averaged over `mc_samples` projection draws.
pub fn ssm(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    sampler: &ProjectionSampler,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = require_vector(x, "ssm")?;
    let eps = sampler.epsilon(d);
    let mut terms = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples.max(1) {
        let v = Tensor::vector(&sampler.draw(rng, d));
        let (t1, t2) = ssm_parts(tape, net, x, &v, eps)?;
        terms.push(tape.add(&t1, &t2)?);
    }
    mc_mean(tape, terms)
}

/// The two FD-SSM terms for one explicit projection v:
/// ((1/2ε²)(vᵀs(x+v) − vᵀs(x−v)), (1/8d)‖s(x+v) + s(x−v)‖²).
pub fn fd_ssm_parts(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    v: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    let d = require_vector(x, "fd_ssm")?;
    let x_on = tape.ensure(x)?;
    let v_on = tape.ensure(v)?;
    let xp = tape.add(&x_on, &v_on)?;
    let xm = tape.sub(&x_on, &v_on)?;
    let sp = net.forward(tape, &xp, None)?;
    let sm = net.forward(tape, &xm, None)?;
    let up = tape.inner(&v_on, &sp)?;
    let um = tape.inner(&v_on, &sm)?;
    let diff = tape.sub(&up, &um)?;
    let term1 = tape.scale(&diff, 1.0 / (2.0 * epsilon * epsilon))?;
    let ssum = tape.add(&sp, &sm)?;
    let norm = tape.sqnorm(&ssum)?;
    let term2 = tape.scale(&norm, 1.0 / (8.0 * d as f64))?;
    Ok((term1, term2))
}

/// Finite-difference sliced score matching, averaged over draws. No
/// second-order differentiation: two forward passes per draw.
pub fn fd_ssm(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    sampler: &ProjectionSampler,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = require_vector(x, "fd_ssm")?;
    let eps = sampler.epsilon(d);
    let mut terms = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples.max(1) {
        let v = Tensor::vector(&sampler.draw(rng, d));
        let (t1, t2) = fd_ssm_parts(tape, net, x, &v, eps)?;
        terms.push(tape.add(&t1, &t2)?);
    }
    mc_mean(tape, terms)
}

/// The Gaussian kernel score target (x0 − x̃)/σ², evaluated literally.
pub fn dsm_target(x0: &[f64], x_tilde: &[f64], sigma: f64) -> Vec<f64> {
    x0.iter()
        .zip(x_tilde)
        .map(|(&a, &b)| (a - b) / (sigma * sigma))
        .collect()
}

/// Denoising score matching: x̃ = x0 + σz, loss ½‖s_θ(x̃, t) − (x0−x̃)/σ²‖²,
/// averaged over `mc_samples` noise draws.
pub fn dsm(
    tape: &mut Tape,
    net: &BoundNet,
    x0: &Tensor,
    sigma: f64,
    t: Option<f64>,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = require_vector(x0, "dsm")?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("dsm needs sigma > 0, got {sigma}")));
    }
    let x0_on = tape.ensure(x0)?;
    let mut terms = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples.max(1) {
        let z = Tensor::vector(&rng::standard_normal(rng, d));
        let noise = tape.scale(&z, sigma)?;
        let xt = tape.add(&x0_on, &noise)?;
        let delta = tape.sub(&x0_on, &xt)?;
        let target = tape.scale(&delta, 1.0 / (sigma * sigma))?;
        let tf = net.tfeat_for(&xt, t)?;
        let s = net.forward(tape, &xt, tf.as_ref())?;
        let resid = tape.sub(&s, &target)?;
        let norm = tape.sqnorm(&resid)?;
        terms.push(tape.scale(&norm, 0.5)?);
    }
    mc_mean(tape, terms)
}

/// Exact local curvature smoothing: sm_exact + ½σ²‖∇ₓs‖_F², the reference
/// objective the stochastic LCSS estimates in expectation.
pub fn lcs_exact(tape: &mut Tape, net: &BoundNet, x: &Tensor, sigma: f64) -> Result<Tensor> {
    let d = require_vector(x, "lcs_exact")?;
    check_exact_dim(d, "lcs_exact")?;
    let x_on = tape.ensure(x)?;
    let s = net.forward(tape, &x_on, None)?;
    let mut trace: Option<Tensor> = None;
    let mut frob: Option<Tensor> = None;
    for i in 0..d {
        let row = tape.jacobian_row(&s, i, &x_on)?;
        let diag = tape.slice(&row, i, i + 1)?;
        let diag = tape.sum(&diag)?;
        trace = Some(match trace {
            None => diag,
            Some(acc) => tape.add(&acc, &diag)?,
        });
        let rn = tape.sqnorm(&row)?;
        frob = Some(match frob {
            None => rn,
            Some(acc) => tape.add(&acc, &rn)?,
        });
    }
    let norm = tape.sqnorm(&s)?;
    let half_norm = tape.scale(&norm, 0.5)?;
    let base = tape.add(&trace.expect("d ≥ 1"), &half_norm)?;
    let reg = tape.scale(&frob.expect("d ≥ 1"), 0.5 * sigma * sigma)?;
    tape.add(&base, &reg)
}

/// Stochastic local curvature smoothing: x' = x + σz,
/// γ·s_θ(x', t)ᵀ(x'−x)/σ² + ½‖s_θ(x', t)‖², averaged over `mc_samples`.
pub fn lcss(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    sigma: f64,
    t: Option<f64>,
    gamma: f64,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    lcss_with_sign(tape, net, x, sigma, t, gamma, mc_samples, rng, 1.0)
}

/// Validation-harness mutant of [`lcss`] with the inner-product sign
/// flipped; exists so the check registry can prove it catches the bug.
#[doc(hidden)]
#[allow(clippy::too_many_arguments)]
pub fn lcss_mutated(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    sigma: f64,
    t: Option<f64>,
    gamma: f64,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    lcss_with_sign(tape, net, x, sigma, t, gamma, mc_samples, rng, -1.0)
}

#[allow(clippy::too_many_arguments)]
fn lcss_with_sign(
    tape: &mut Tape,
    net: &BoundNet,
    x: &Tensor,
    sigma: f64,
    t: Option<f64>,
    gamma: f64,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
    sign: f64,
) -> Result<Tensor> {
    let d = require_vector(x, "lcss")?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("lcss needs sigma > 0, got {sigma}")));
    }
    let x_on = tape.ensure(x)?;
    let mut terms = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples.max(1) {
        let z = Tensor::vector(&rng::standard_normal(rng, d));
        let diff = tape.scale(&z, sigma)?;
        let xp = tape.add(&x_on, &diff)?;
        let tf = net.tfeat_for(&xp, t)?;
        let s = net.forward(tape, &xp, tf.as_ref())?;
        let ip = tape.inner(&s, &diff)?;
        let term1 = tape.scale(&ip, sign * gamma / (sigma * sigma))?;
        let norm = tape.sqnorm(&s)?;
        let term2 = tape.scale(&norm, 0.5)?;
        terms.push(tape.add(&term1, &term2)?);
    }
    mc_mean(tape, terms)
}

fn sdm_kind_ok(kind: ObjectiveKind) -> Result<()> {
    match kind {
        ObjectiveKind::Dsm
        | ObjectiveKind::Lcss
        | ObjectiveKind::LcssGamma
        | ObjectiveKind::Ssm
        | ObjectiveKind::FdSsm => Ok(()),
        other => Err(Error::ContractViolation(format!(
            "sdm_loss supports the stochastic objectives, not {}",
            other.name()
        ))),
    }
}

/// Time-integrated loss with every random draw supplied by the caller:
/// per-row times `ts`, noise `z` (`[B,d]`), and projections `v` (`[B,d]`,
/// SSM/FD-SSM only). This is the deterministic core of [`sdm_loss`].
///
/// Row b is weighted by λ(t_b); with w = λ(t)/σ_t² constant in closed form,
/// the weighted objectives are assembled with no σ_t division anywhere:
///   LCSS: w·(γ·σ_b·⟨s_b, z_b⟩ + ½σ_b²‖s_b‖²)
///   DSM:  ½w·‖σ_b·s_b + z_b‖²
///   SSM/FD-SSM: λ_b · (their fixed-noise form at x_t).
pub fn sdm_loss_with_draws(
    tape: &mut Tape,
    net: &BoundNet,
    x0: &Tensor,
    ts: &[f64],
    z: &Tensor,
    v: Option<&Tensor>,
    sde: &SdeSchedule,
    spec: &ObjectiveSpec,
) -> Result<Tensor> {
    let (b, d) = require_batch(x0, "sdm_loss")?;
    sdm_kind_ok(spec.kind)?;
    spec.validate()?;
    if !net.is_time_conditional() {
        return Err(Error::ContractViolation(
            "sdm_loss needs a time-conditional net".into(),
        ));
    }
    if ts.len() != b {
        return Err(Error::shape("sdm_loss times", b, ts.len()));
    }
    if z.shape() != x0.shape() {
        return Err(Error::shape("sdm_loss noise", x0.shape(), z.shape()));
    }
    let sched = net
        .schedule()
        .ok_or_else(|| Error::ContractViolation("time-conditional net has no schedule".into()))?;

    let mut sigmas = Vec::with_capacity(b);
    let mut feats = Vec::with_capacity(b);
    for &t in ts {
        sigmas.push(sde.marginal_std(t)?);
        feats.push(sched.time_feature(t)?);
    }
    let w = sde.weight_over_sigma_sq();
    let bf = b as f64;
    let df = d as f64;

    let x0_on = tape.ensure(x0)?;
    let z_on = tape.ensure(z)?;
    let sig_t = Tensor::vector(&sigmas);
    let xt = {
        let scaled = tape.row_scale(&z_on, &sig_t)?;
        tape.add(&x0_on, &scaled)?
    };
    let tf = Tensor::matrix(b, 1, feats)?;

    match spec.kind {
        ObjectiveKind::Lcss | ObjectiveKind::LcssGamma => {
            let s = net.forward(tape, &xt, Some(&tf))?;
            let ri = tape.row_inner(&s, &z_on)?;
            let c1: Vec<f64> = sigmas.iter().map(|&sg| w * spec.gamma * sg / bf).collect();
            let term1 = tape.inner(&ri, &Tensor::vector(&c1))?;
            let rs = tape.row_inner(&s, &s)?;
            let c2: Vec<f64> = sigmas.iter().map(|&sg| 0.5 * w * sg * sg / bf).collect();
            let term2 = tape.inner(&rs, &Tensor::vector(&c2))?;
            tape.add(&term1, &term2)
        }
        ObjectiveKind::Dsm => {
            let s = net.forward(tape, &xt, Some(&tf))?;
            let scaled = tape.row_scale(&s, &sig_t)?;
            let resid = tape.add(&scaled, &z_on)?;
            let rr = tape.row_inner(&resid, &resid)?;
            let total = tape.sum(&rr)?;
            tape.scale(&total, 0.5 * w / bf)
        }
        ObjectiveKind::Ssm => {
            let v = v.ok_or_else(|| Error::ContractViolation("ssm needs projections".into()))?;
            let eps = spec.epsilon;
            let s = net.forward(tape, &xt, Some(&tf))?;
            let v_on = tape.ensure(v)?;
            let sv = tape.row_inner(&s, &v_on)?;
            let total = tape.sum(&sv)?;
            let jv = tape.backward(&total, &[&xt])?.remove(0);
            let quad = tape.row_inner(&v_on, &jv)?;
            let c1: Vec<f64> = sigmas
                .iter()
                .map(|&sg| w * sg * sg / (eps * eps * bf))
                .collect();
            let term1 = tape.inner(&quad, &Tensor::vector(&c1))?;
            let rs = tape.row_inner(&s, &s)?;
            let c2: Vec<f64> = sigmas
                .iter()
                .map(|&sg| w * sg * sg / (2.0 * df * bf))
                .collect();
            let term2 = tape.inner(&rs, &Tensor::vector(&c2))?;
            tape.add(&term1, &term2)
        }
        ObjectiveKind::FdSsm => {
            let v = v.ok_or_else(|| Error::ContractViolation("fd_ssm needs projections".into()))?;
            let eps = spec.epsilon;
            let v_on = tape.ensure(v)?;
            let xp = tape.add(&xt, &v_on)?;
            let xm = tape.sub(&xt, &v_on)?;
            let sp = net.forward(tape, &xp, Some(&tf))?;
            let sm = net.forward(tape, &xm, Some(&tf))?;
            let up = tape.row_inner(&v_on, &sp)?;
            let um = tape.row_inner(&v_on, &sm)?;
            let diff = tape.sub(&up, &um)?;
            let c1: Vec<f64> = sigmas
                .iter()
                .map(|&sg| w * sg * sg / (2.0 * eps * eps * bf))
                .collect();
            let term1 = tape.inner(&diff, &Tensor::vector(&c1))?;
            let ssum = tape.add(&sp, &sm)?;
            let rs = tape.row_inner(&ssum, &ssum)?;
            let c2: Vec<f64> = sigmas
                .iter()
                .map(|&sg| w * sg * sg / (8.0 * df * bf))
                .collect();
            let term2 = tape.inner(&rs, &Tensor::vector(&c2))?;
            tape.add(&term1, &term2)
        }
        _ => unreachable!("guarded by sdm_kind_ok"),
    }
}

/// Like [`sdm_loss`] but with the per-row times fixed by the caller; noise
/// (and projections, for the sliced kinds) are drawn from `rng` in that
/// order.
pub fn sdm_loss_at_times(
    tape: &mut Tape,
    net: &BoundNet,
    x0: &Tensor,
    ts: &[f64],
    sde: &SdeSchedule,
    spec: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, d) = require_batch(x0, "sdm_loss")?;
    let z = Tensor::matrix(b, d, rng::standard_normal(rng, b * d))?;
    let v = match spec.kind {
        ObjectiveKind::Ssm | ObjectiveKind::FdSsm => Some(Tensor::matrix(
            b,
            d,
            spec.sampler(d).draw(rng, b * d),
        )?),
        _ => None,
    };
    sdm_loss_with_draws(tape, net, x0, ts, &z, v.as_ref(), sde, spec)
}

/// Score-based diffusion loss: Monte Carlo estimate of
/// ∫ λ(t)·E[J(θ, x0, t)] dt with t ∼ Uniform(t_min, T) per batch row.
pub fn sdm_loss(
    tape: &mut Tape,
    net: &BoundNet,
    x0: &Tensor,
    sde: &SdeSchedule,
    spec: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, _) = require_batch(x0, "sdm_loss")?;
    let ts = rng::uniform(rng, b, T_MIN, sde.horizon());
    sdm_loss_at_times(tape, net, x0, &ts, sde, spec, rng)
}

/// Fixed-σ batch loss used by training: the per-row objective of
/// `spec.kind` averaged over the rows of `x0`, `mc_samples` times. The
/// exact-trace kinds are per-sample validation tools and are rejected here.
pub fn batch_loss(
    tape: &mut Tape,
    net: &BoundNet,
    x0: &Tensor,
    spec: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, d) = require_batch(x0, "batch_loss")?;
    spec.validate()?;
    let bf = b as f64;
    let df = d as f64;
    let x0_on = tape.ensure(x0)?;
    let mc = spec.mc_samples.max(1);
    let mut terms = Vec::with_capacity(mc);
    match spec.kind {
        ObjectiveKind::Lcss | ObjectiveKind::LcssGamma => {
            for _ in 0..mc {
                let z = Tensor::matrix(b, d, rng::standard_normal(rng, b * d))?;
                let diff = tape.scale(&z, spec.sigma)?;
                let xp = tape.add(&x0_on, &diff)?;
                let s = net.forward(tape, &xp, None)?;
                let ri = tape.row_inner(&s, &diff)?;
                let t1 = tape.sum(&ri)?;
                let t1 = tape.scale(&t1, spec.gamma / (spec.sigma * spec.sigma * bf))?;
                let rs = tape.row_inner(&s, &s)?;
                let t2 = tape.sum(&rs)?;
                let t2 = tape.scale(&t2, 0.5 / bf)?;
                terms.push(tape.add(&t1, &t2)?);
            }
        }
        ObjectiveKind::Dsm => {
            for _ in 0..mc {
                let z = Tensor::matrix(b, d, rng::standard_normal(rng, b * d))?;
                let noise = tape.scale(&z, spec.sigma)?;
                let xt = tape.add(&x0_on, &noise)?;
                let delta = tape.sub(&x0_on, &xt)?;
                let target = tape.scale(&delta, 1.0 / (spec.sigma * spec.sigma))?;
                let s = net.forward(tape, &xt, None)?;
                let resid = tape.sub(&s, &target)?;
                let rr = tape.row_inner(&resid, &resid)?;
                let total = tape.sum(&rr)?;
                terms.push(tape.scale(&total, 0.5 / bf)?);
            }
        }
        ObjectiveKind::Ssm => {
            let sampler = spec.sampler(d);
            let eps = sampler.epsilon(d);
            let s = net.forward(tape, &x0_on, None)?;
            for _ in 0..mc {
                let v = Tensor::matrix(b, d, sampler.draw(rng, b * d))?;
                let v_on = tape.ensure(&v)?;
                let sv = tape.row_inner(&s, &v_on)?;
                let total = tape.sum(&sv)?;
                let jv = tape.backward(&total, &[&x0_on])?.remove(0);
                let quad = tape.row_inner(&v_on, &jv)?;
                let t1 = tape.sum(&quad)?;
                let t1 = tape.scale(&t1, 1.0 / (eps * eps * bf))?;
                let rs = tape.row_inner(&s, &s)?;
                let t2 = tape.sum(&rs)?;
                let t2 = tape.scale(&t2, 1.0 / (2.0 * df * bf))?;
                terms.push(tape.add(&t1, &t2)?);
            }
        }
        ObjectiveKind::FdSsm => {
            let sampler = spec.sampler(d);
            let eps = sampler.epsilon(d);
            for _ in 0..mc {
                let v = Tensor::matrix(b, d, sampler.draw(rng, b * d))?;
                let v_on = tape.ensure(&v)?;
                let xp = tape.add(&x0_on, &v_on)?;
                let xm = tape.sub(&x0_on, &v_on)?;
                let sp = net.forward(tape, &xp, None)?;
                let sm = net.forward(tape, &xm, None)?;
                let up = tape.row_inner(&v_on, &sp)?;
                let um = tape.row_inner(&v_on, &sm)?;
                let diff = tape.sub(&up, &um)?;
                let t1 = tape.sum(&diff)?;
                let t1 = tape.scale(&t1, 1.0 / (2.0 * eps * eps * bf))?;
                let ssum = tape.add(&sp, &sm)?;
                let rs = tape.row_inner(&ssum, &ssum)?;
                let t2 = tape.sum(&rs)?;
                let t2 = tape.scale(&t2, 1.0 / (8.0 * df * bf))?;
                terms.push(tape.add(&t1, &t2)?);
            }
        }
        ObjectiveKind::Sm | ObjectiveKind::LcsExact => {
            return Err(Error::ContractViolation(format!(
                "{} is a per-sample validation objective; use sm_exact/lcs_exact",
                spec.kind.name()
            )));
        }
    }
    mc_mean(tape, terms)
}

/// Empirical check of the Hutchinson trace-error bound
/// |Tr(A) − T̃_A| ≤ ‖A‖_F/√M.
#[derive(Clone, Copy, Debug)]
pub struct HutchinsonReport {
    pub trace: f64,
    pub frobenius: f64,
    /// Fraction of trials whose absolute error stayed within ‖A‖_F/√M.
    pub within_bound_fraction: f64,
    /// RMS error of the M-sample estimator over all trials.
    pub rms_error: f64,
    /// RMS error using M/4 samples (M when M < 4), for the decay slope.
    pub rms_error_quarter: f64,
    /// rms_error_quarter / rms_error; ≈ 2 when the error decays as 1/√M.
    pub decay_ratio: f64,
}

pub fn hutchinson_error_bound_check(
    a: &[f64],
    d: usize,
    m: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HutchinsonReport> {
    if a.len() != d * d {
        return Err(Error::shape("hutchinson", d * d, a.len()));
    }
    check_exact_dim(d, "hutchinson_error_bound_check")?;
    if m < 1 || trials < 1 {
        return Err(Error::Config("hutchinson needs m ≥ 1, trials ≥ 1".into()));
    }
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let quad = |u: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += a[i * d + j] * u[j];
            }
            acc += u[i] * row;
        }
        acc
    };
    let m_quarter = (m / 4).max(1);
    let bound = frob / (m as f64).sqrt();
    let mut within = 0usize;
    let mut sq_sum = 0.0;
    let mut sq_sum_quarter = 0.0;
    for _ in 0..trials {
        let mut est = 0.0;
        let mut est_quarter = 0.0;
        for k in 0..m {
            let u = rng::rademacher(rng, d, 1.0);
            let q = quad(&u);
            est += q;
            if k < m_quarter {
                est_quarter += q;
            }
        }
        est /= m as f64;
        est_quarter /= m_quarter as f64;
        let err = (trace - est).abs();
        if err <= bound + 1e-12 {
            within += 1;
        }
        sq_sum += err * err;
        let err_q = trace - est_quarter;
        sq_sum_quarter += err_q * err_q;
    }
    let rms = (sq_sum / trials as f64).sqrt();
    let rms_quarter = (sq_sum_quarter / trials as f64).sqrt();
    Ok(HutchinsonReport {
        trace,
        frobenius: frob,
        within_bound_fraction: within as f64 / trials as f64,
        rms_error: rms,
        rms_error_quarter: rms_quarter,
        decay_ratio: if rms > 0.0 { rms_quarter / rms } else { 1.0 },
    })
}
