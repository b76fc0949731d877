//! Trainable score and energy networks.
//!
//! A [`ScoreNet`] is a small MLP over flat parameters. In score mode it maps
//! x ↦ s_θ(x) ∈ R^d directly; in energy mode it maps x ↦ f_θ(x) ∈ R and the
//! score is ∇_x f_θ, obtained with one recorded backward pass — which keeps
//! the score differentiable with respect to both x and θ, so objectives that
//! differentiate the score (and the trainer that differentiates those) all
//! run through the same tape.
//!
//! Time conditioning appends one standardized log-σ feature column to the
//! input (see [`crate::sde::SdeSchedule::time_feature`]) and standardizes
//! both ends of the network with c = 1/√(1+σ_t²): inputs are scaled by c so
//! the first layer sees O(1) magnitudes whether σ_t is 0.01 or 50, and raw
//! outputs are scaled by c so the head's target interpolates from the data
//! score (σ_t ≪ 1) to noise prediction (σ_t ≫ 1) without ever exploding or
//! vanishing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::sde::SdeSchedule;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    Score,
    Energy,
}

#[derive(Clone, Debug)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
    pub time_conditional: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input_dim and output_dim must be positive".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the first layer's input: the data dimension plus the time
    /// feature column when conditional.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + usize::from(self.time_conditional)
    }

    /// (fan_in, fan_out) for each affine layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.feature_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    /// Σ over layers of (fan_in + 1)·fan_out.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Flat-parameter MLP. Parameters are stored layer by layer, each layer as
/// its weight matrix `[fan_out × fan_in]` row-major followed by its bias.
pub struct ScoreNet {
    pub config: MlpConfig,
    pub mode: NetMode,
    params: Vec<f64>,
    momentum: f64,
    velocity: Vec<f64>,
    schedule: Option<SdeSchedule>,
}

const CKPT_MAGIC: &[u8; 4] = b"SMLB";
const CKPT_VERSION: u32 = 1;

impl ScoreNet {
    /// Initializes weights uniformly on ±1/√fan_in and biases to zero,
    /// deterministically from `seed`.
    pub fn init(config: MlpConfig, mode: NetMode, seed: u64) -> Result<Self> {
        config.validate()?;
        match mode {
            NetMode::Score if config.output_dim != config.input_dim => {
                return Err(Error::Config(format!(
                    "score form needs output_dim == input_dim, got {} vs {}",
                    config.output_dim, config.input_dim
                )))
            }
            NetMode::Energy if config.output_dim != 1 => {
                return Err(Error::Config(format!(
                    "energy form needs output_dim == 1, got {}",
                    config.output_dim
                )))
            }
            _ => {}
        }
        let mut rng = rng::stream_rng(seed, streams::INIT);
        let mut params = Vec::with_capacity(config.param_count());
        for (fan_in, fan_out) in config.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend(rng::uniform(&mut rng, fan_in * fan_out, -bound, bound));
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(ScoreNet {
            config,
            mode,
            params,
            momentum: 0.0,
            velocity: Vec::new(),
            schedule: None,
        })
    }

    /// Attaches the schedule a time-conditional net uses to turn `t` into
    /// its feature column.
    pub fn set_schedule(&mut self, schedule: SdeSchedule) {
        self.schedule = Some(schedule);
    }

    pub fn schedule(&self) -> Option<&SdeSchedule> {
        self.schedule.as_ref()
    }

    /// Enables heavy-ball momentum (0 disables; 0.9 is the conventional
    /// setting).
    pub fn set_momentum(&mut self, momentum: f64) {
        self.momentum = momentum;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// θ ← θ − lr·g, with optional momentum on the update direction.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape("sgd_step", self.params.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        if self.momentum > 0.0 {
            if self.velocity.len() != self.params.len() {
                self.velocity = vec![0.0; self.params.len()];
            }
            for i in 0..self.params.len() {
                self.velocity[i] = self.momentum * self.velocity[i] + grads[i];
                self.params[i] -= lr * self.velocity[i];
            }
        } else {
            for i in 0..self.params.len() {
                self.params[i] -= lr * grads[i];
            }
        }
        Ok(())
    }

    /// Registers every parameter block as a tape leaf, returning the bound
    /// form used to build differentiable forward passes.
    pub fn bind<'n>(&'n self, tape: &mut Tape) -> BoundNet<'n> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in self.config.layer_dims() {
            let w = Tensor::matrix(fan_out, fan_in, self.params[offset..offset + fan_in * fan_out].to_vec())
                .expect("layer dims consistent");
            offset += fan_in * fan_out;
            let b = Tensor::vector(&self.params[offset..offset + fan_out]);
            offset += fan_out;
            weights.push(tape.leaf(&w));
            biases.push(tape.leaf(&b));
        }
        BoundNet {
            net: self,
            weights,
            biases,
        }
    }

    /// Fast tape-free score evaluation for samplers: `x` is row-major
    /// `[rows, input_dim]`, `t` applies to every row. Energy mode runs a
    /// hand-rolled backward sweep to return ∇_x f_θ. Conditional nets apply
    /// the same c = 1/√(1+σ_t²) input and output scaling as
    /// [`BoundNet::forward`].
    pub fn score_plain(&self, x: &[f64], rows: usize, t: Option<f64>) -> Result<Vec<f64>> {
        let d = self.config.input_dim;
        if x.len() != rows * d {
            return Err(Error::shape("score_plain", rows * d, x.len()));
        }
        let cscale = self.cond_scale_plain(t)?;
        let feat = self.features_plain(x, rows, t)?;
        let dims = self.config.layer_dims();
        let nf = self.config.feature_dim();

        // Forward, keeping pre-activations for the backward sweep.
        let mut acts: Vec<Vec<f64>> = vec![feat];
        let mut offset = 0;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &self.params[offset..offset + fan_out];
            offset += fan_out;
            let input = acts.last().unwrap();
            let mut z = vec![0.0; rows * fan_out];
            crate::tensor::kernels::matmul_abt(input, w, &mut z, rows, fan_out, fan_in);
            for r in 0..rows {
                for j in 0..fan_out {
                    z[r * fan_out + j] += b[j];
                }
            }
            if li + 1 < dims.len() {
                self.apply_activation(&mut z);
            }
            acts.push(z);
        }

        match self.mode {
            NetMode::Score => {
                let mut out = acts.pop().unwrap();
                if let Some(c) = cscale {
                    for v in &mut out {
                        *v *= c;
                    }
                }
                Ok(out)
            }
            NetMode::Energy => {
                // d f / d input, layer by layer in reverse. The adjoint of the
                // scalar output is 1 per row.
                let mut grad = vec![1.0; rows * self.config.output_dim];
                let mut w_end = self.params.len();
                for (li, &(fan_in, fan_out)) in dims.iter().enumerate().rev() {
                    w_end -= fan_out;
                    let w_start = w_end - fan_in * fan_out;
                    let w = &self.params[w_start..w_end];
                    w_end = w_start;
                    if li + 1 < dims.len() {
                        // grad currently holds dL/d act(z); fold in act'.
                        let z = &acts[li + 1];
                        self.fold_activation_grad(z, &mut grad);
                    }
                    let mut next = vec![0.0; rows * fan_in];
                    crate::tensor::kernels::matmul_ab(&grad, w, &mut next, rows, fan_in, fan_out);
                    grad = next;
                }
                // Drop the time-feature column if present.
                let mut out = if nf == d {
                    grad
                } else {
                    let mut out = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        out.extend_from_slice(&grad[r * nf..r * nf + d]);
                    }
                    out
                };
                // grad is w.r.t. the scaled input c·x: one factor of c from
                // the chain rule, one from the output scaling.
                if let Some(c) = cscale {
                    let factor = c * c;
                    for v in &mut out {
                        *v *= factor;
                    }
                }
                Ok(out)
            }
        }
    }

    /// The c = 1/√(1+σ_t²) factor conditional inputs and outputs carry,
    /// derived through the time feature exactly as the tape path derives it.
    /// `None` when no scaling applies; contract violations are left to
    /// `features_plain`.
    fn cond_scale_plain(&self, t: Option<f64>) -> Result<Option<f64>> {
        match (self.config.time_conditional, t) {
            (true, Some(t)) => {
                let sched = self.schedule.as_ref().ok_or_else(|| {
                    Error::ContractViolation("time-conditional net has no schedule".into())
                })?;
                let f = sched.time_feature(t)?;
                Ok(Some(sched.cond_scale_from_feature(f)?))
            }
            _ => Ok(None),
        }
    }

    fn apply_activation(&self, z: &mut [f64]) {
        match self.config.activation {
            Activation::Tanh => {
                let src = z.to_vec();
                crate::tensor::kernels::vtanh(&src, z);
            }
            Activation::Softplus => {
                for v in z.iter_mut() {
                    *v = crate::tensor::kernels::softplus(*v);
                }
            }
        }
    }

    /// Multiplies `grad` elementwise by act'(z) where `acts` holds act(z).
    fn fold_activation_grad(&self, acts: &[f64], grad: &mut [f64]) {
        match self.config.activation {
            Activation::Tanh => {
                for (g, &a) in grad.iter_mut().zip(acts) {
                    *g *= 1.0 - a * a;
                }
            }
            Activation::Softplus => {
                // act = softplus(z) ⇒ act' = sigmoid(z) = 1 − e^{−act}.
                for (g, &a) in grad.iter_mut().zip(acts) {
                    *g *= 1.0 - (-a).exp();
                }
            }
        }
    }

    fn features_plain(&self, x: &[f64], rows: usize, t: Option<f64>) -> Result<Vec<f64>> {
        let d = self.config.input_dim;
        match (self.config.time_conditional, t) {
            (false, None) => Ok(x.to_vec()),
            (false, Some(_)) => Err(Error::ContractViolation(
                "t supplied to an unconditional net".into(),
            )),
            (true, None) => Err(Error::ContractViolation(
                "time-conditional net needs t".into(),
            )),
            (true, Some(t)) => {
                let sched = self.schedule.as_ref().ok_or_else(|| {
                    Error::ContractViolation("time-conditional net has no schedule".into())
                })?;
                let f = sched.time_feature(t)?;
                let c = sched.cond_scale_from_feature(f)?;
                let mut out = Vec::with_capacity(rows * (d + 1));
                for r in 0..rows {
                    for &v in &x[r * d..(r + 1) * d] {
                        out.push(c * v);
                    }
                    out.push(f);
                }
                Ok(out)
            }
        }
    }

    /// Serializes magic, version, parameter count, input_dim, the
    /// time-conditional flag, and θ as little-endian doubles.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(20 + self.params.len() * 8);
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.config.input_dim as u32).to_le_bytes());
        bytes.extend_from_slice(&u32::from(self.config.time_conditional).to_le_bytes());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Restores θ into a freshly validated net of the given architecture,
    /// rejecting checkpoints whose header disagrees with it.
    pub fn load(path: &Path, config: MlpConfig, mode: NetMode) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 20 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        if &bytes[0..4] != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", word(4))));
        }
        let count = word(8) as usize;
        let input_dim = word(12) as usize;
        let conditional = word(16) != 0;
        if input_dim != config.input_dim {
            return Err(Error::Checkpoint(format!(
                "input_dim {input_dim} does not match config {}",
                config.input_dim
            )));
        }
        if conditional != config.time_conditional {
            return Err(Error::Checkpoint("time-conditional flag mismatch".into()));
        }
        if count != config.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match config {}",
                config.param_count()
            )));
        }
        if bytes.len() != 20 + count * 8 {
            return Err(Error::Checkpoint("payload length mismatch".into()));
        }
        let mut net = ScoreNet::init(config, mode, 0)?;
        for (i, chunk) in bytes[20..].chunks_exact(8).enumerate() {
            net.params[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(net)
    }
}

/// A [`ScoreNet`] whose parameters are registered as leaves on one tape.
/// Forward passes build differentiable graphs; [`BoundNet::grads_flat`]
/// extracts ∂loss/∂θ in the flat layout [`ScoreNet::sgd_step`] expects.
pub struct BoundNet<'n> {
    net: &'n ScoreNet,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl<'n> BoundNet<'n> {
    /// Score field for a batch `x: [B, d]` (or a single `[d]` row), as a
    /// tape tensor differentiable in x and θ. `tfeat` is the per-row time
    /// feature column `[B, 1]`, required iff the net is time-conditional.
    ///
    /// Conditional nets return c·net(c·x, feat) with c = 1/√(1+σ_t²) (see
    /// [`SdeSchedule::cond_scale_from_feature`]): noise prediction at large
    /// σ_t, direct score prediction at small σ_t, with the head's input and
    /// target both O(1) at every time slice.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, tfeat: Option<&Tensor>) -> Result<Tensor> {
        let raw = match self.net.mode {
            NetMode::Score => {
                let x_on = tape.ensure(x)?;
                let feat = self.features(tape, &x_on, tfeat)?;
                self.layers(tape, &feat)?
            }
            NetMode::Energy => {
                let x_on = tape.ensure(x)?;
                let e = {
                    let feat = self.features(tape, &x_on, tfeat)?;
                    self.layers(tape, &feat)?
                };
                let total = tape.sum(&e)?;
                tape.backward(&total, &[&x_on])?.remove(0)
            }
        };
        self.output_rescale(tape, raw, tfeat)
    }

    /// Applies the conditional c = 1/√(1+σ_t²) output scaling; unconditional
    /// nets pass through. c comes from inverting each row's time feature, so
    /// the tape and plain evaluation paths use bit-identical factors.
    fn output_rescale(&self, tape: &mut Tape, raw: Tensor, tfeat: Option<&Tensor>) -> Result<Tensor> {
        if !self.net.config.time_conditional {
            return Ok(raw);
        }
        let feat = tfeat.ok_or_else(|| {
            Error::ContractViolation("time-conditional net needs t".into())
        })?;
        let sched = self.net.schedule.as_ref().ok_or_else(|| {
            Error::ContractViolation("time-conditional net has no schedule".into())
        })?;
        match feat.shape() {
            [1] => {
                let c = sched.cond_scale_from_feature(feat.data()[0])?;
                tape.scale(&raw, c)
            }
            [rows, 1] => {
                let mut cs = Vec::with_capacity(*rows);
                for &f in feat.data() {
                    cs.push(sched.cond_scale_from_feature(f)?);
                }
                let cs = Tensor::vector(&cs);
                tape.row_scale(&raw, &cs)
            }
            other => Err(Error::shape("output_rescale", "[B,1] or [1]", other)),
        }
    }

    /// Raw energy head f_θ: `[B, 1]` (or scalar-shaped `[1]`). Energy mode
    /// only.
    pub fn energy(&self, tape: &mut Tape, x: &Tensor, tfeat: Option<&Tensor>) -> Result<Tensor> {
        if self.net.mode != NetMode::Energy {
            return Err(Error::ContractViolation("energy() needs an energy-mode net".into()));
        }
        let x_on = tape.ensure(x)?;
        let feat = self.features(tape, &x_on, tfeat)?;
        self.layers(tape, &feat)
    }

    fn features(&self, tape: &mut Tape, x: &Tensor, tfeat: Option<&Tensor>) -> Result<Tensor> {
        let d = self.net.config.input_dim;
        let ok_shape = match x.shape() {
            [n] => *n == d,
            [_, n] => *n == d,
            _ => false,
        };
        if !ok_shape {
            return Err(Error::shape("forward", format!("[..,{d}]"), x.shape()));
        }
        match (self.net.config.time_conditional, tfeat) {
            (false, None) => Ok(x.clone()),
            (false, Some(_)) => Err(Error::ContractViolation(
                "t supplied to an unconditional net".into(),
            )),
            (true, None) => Err(Error::ContractViolation(
                "time-conditional net needs t".into(),
            )),
            (true, Some(f)) => {
                let scaled = self.input_rescale(tape, x, f)?;
                tape.concat(&scaled, f)
            }
        }
    }

    /// Applies the same conditional c = 1/√(1+σ_t²) scaling to the input
    /// before the first layer, via the identical per-row feature inversion,
    /// so the tape and plain paths stay bit-identical.
    fn input_rescale(&self, tape: &mut Tape, x: &Tensor, feat: &Tensor) -> Result<Tensor> {
        let sched = self.net.schedule.as_ref().ok_or_else(|| {
            Error::ContractViolation("time-conditional net has no schedule".into())
        })?;
        match feat.shape() {
            [1] => {
                let c = sched.cond_scale_from_feature(feat.data()[0])?;
                tape.scale(x, c)
            }
            [rows, 1] => {
                let mut cs = Vec::with_capacity(*rows);
                for &f in feat.data() {
                    cs.push(sched.cond_scale_from_feature(f)?);
                }
                let cs = Tensor::vector(&cs);
                tape.row_scale(x, &cs)
            }
            other => Err(Error::shape("input_rescale", "[B,1] or [1]", other)),
        }
    }

    fn layers(&self, tape: &mut Tape, feat: &Tensor) -> Result<Tensor> {
        let mut h = feat.clone();
        let last = self.weights.len() - 1;
        for (li, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = tape.matvec(w, &h)?;
            let z = tape.bias_add(&z, b)?;
            h = if li < last {
                match self.net.config.activation {
                    Activation::Tanh => tape.tanh(&z)?,
                    Activation::Softplus => tape.softplus(&z)?,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.net.config
    }

    pub fn mode(&self) -> NetMode {
        self.net.mode
    }

    pub fn is_time_conditional(&self) -> bool {
        self.net.config.time_conditional
    }

    pub fn schedule(&self) -> Option<&SdeSchedule> {
        self.net.schedule.as_ref()
    }

    /// Builds the time-feature column matching `x`'s batch shape from the
    /// net's schedule: `[B, 1]` for a batched input, `[1]` for a single row.
    /// Returns `None` (and requires `t = None`) for unconditional nets.
    pub fn tfeat_for(&self, x: &Tensor, t: Option<f64>) -> Result<Option<Tensor>> {
        match (self.net.config.time_conditional, t) {
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::ContractViolation(
                "t supplied to an unconditional net".into(),
            )),
            (true, None) => Err(Error::ContractViolation(
                "time-conditional net needs t".into(),
            )),
            (true, Some(t)) => {
                let sched = self.net.schedule.as_ref().ok_or_else(|| {
                    Error::ContractViolation("time-conditional net has no schedule".into())
                })?;
                let f = sched.time_feature(t)?;
                Ok(Some(match x.shape() {
                    [rows, _] => Tensor::matrix(*rows, 1, vec![f; *rows])?,
                    _ => Tensor::vector(&[f]),
                }))
            }
        }
    }

    /// All parameter leaves in flat θ order (W₁, b₁, W₂, b₂, …).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// ∂loss/∂θ flattened to match [`ScoreNet::params`].
    pub fn grads_flat(&self, tape: &mut Tape, loss: &Tensor) -> Result<Vec<f64>> {
        let wrt = self.param_tensors();
        let grads = tape.backward(loss, &wrt)?;
        let mut flat = Vec::with_capacity(self.net.params.len());
        for g in grads {
            flat.extend_from_slice(g.data());
        }
        Ok(flat)
    }
}
