//! Command-line surface: `train`, `sample`, `eval`, `bench`, and `validate`
//! over one shared [`RunConfig`]. Flags override the config file, the file
//! overrides defaults, and every subcommand is deterministic under a fixed
//! seed (bench timing numbers exempt). Exit codes: 0 success, 1 check
//! failure, 2 usage error, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datasets::{write_points_csv, Checkerboard, GaussianMixture};
use crate::error::{Error, Result};
use crate::eval::{self, SteinFn};
use crate::net::{Activation, MlpConfig, NetMode, ScoreNet};
use crate::objectives::{self, ObjectiveKind, ObjectiveSpec};
use crate::rng::{self, stream_rng, streams};
use crate::sde::{langevin, reverse_em, SdeSchedule, T_MIN};
use crate::tensor::{Tape, Tensor};

#[derive(Parser, Debug)]
#[command(name = "smlab", version, about = "Score-matching laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a score or energy net with the selected objective.
    Train(CommonArgs),
    /// Draw samples from a checkpoint and render a density image.
    Sample(CommonArgs),
    /// Score a checkpoint against the dataset's analytic oracle.
    Eval(CommonArgs),
    /// Time full optimization steps per objective and compare.
    Bench(CommonArgs),
    /// Run the invariant check registry; nonzero exit on any failure.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, hide = true)]
        mutate_lcss: bool,
    },
}

/// Every knob as an optional flag; unset flags fall back to `--config`,
/// then to the built-in defaults.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Config file of `key = value` lines (`#` comments). Flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Objective: sm, ssm, fdssm, dsm, lcs, lcss.
    #[arg(long)]
    method: Option<String>,
    /// Diffusion schedule: ve, subvp, or none for fixed-σ training.
    #[arg(long)]
    sde: Option<String>,
    /// Dataset: checkerboard or gmm (8-mode ring).
    #[arg(long)]
    dataset: Option<String>,
    /// Network head: score (vector output) or energy (scalar, score by ∇).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Noise std for dsm/lcss (fixed-σ training).
    #[arg(long)]
    sigma: Option<f64>,
    /// Projection scale for ssm/fdssm.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Balancing coefficient for lcss.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Hidden widths, comma-separated (empty for a single affine layer).
    #[arg(long)]
    hidden: Option<String>,
    /// Sampler steps (Langevin or reverse-time Euler–Maruyama).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    langevin_eps: Option<f64>,
    /// Sample / evaluation point count.
    #[arg(long)]
    n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint path (defaults to <out>/model.ckpt).
    #[arg(long)]
    ckpt: Option<String>,
    /// Bench method list, comma-separated.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    bench_steps: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        take!(method, sde, dataset, mode, hidden, out, ckpt, methods);
        macro_rules! take_copy {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field {
                    cfg.$field = v;
                })*
            };
        }
        take_copy!(
            seed, iters, batch, lr, momentum, sigma, epsilon, gamma, mc_samples, steps,
            langevin_eps, n, bench_steps,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Binary entry point; returns the process exit code instead of exiting so
/// tests can call it in-process.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Train(args) => args.resolve().and_then(|cfg| cmd_train(&cfg)),
        Command::Sample(args) => args.resolve().and_then(|cfg| cmd_sample(&cfg)),
        Command::Eval(args) => args.resolve().and_then(|cfg| cmd_eval(&cfg)),
        Command::Bench(args) => args.resolve().and_then(|cfg| cmd_bench(&cfg)),
        Command::Validate { common, mutate_lcss } => common
            .resolve()
            .and_then(|cfg| cmd_validate(&cfg, *mutate_lcss)),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => 2,
                _ => 3,
            }
        }
    }
}

enum Dataset {
    Checkerboard(Checkerboard),
    Gmm(GaussianMixture),
}

impl Dataset {
    fn from_config(cfg: &RunConfig) -> Result<Self> {
        match cfg.dataset.as_str() {
            "checkerboard" => Ok(Dataset::Checkerboard(Checkerboard::new())),
            "gmm" => Ok(Dataset::Gmm(GaussianMixture::ring8())),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Dataset::Checkerboard(cb) => cb.sample(n, rng),
            Dataset::Gmm(mix) => mix.sample(n, rng),
        }
    }
}

fn net_shape(cfg: &RunConfig) -> Result<(MlpConfig, NetMode)> {
    let mode = match cfg.mode.as_str() {
        "score" => NetMode::Score,
        "energy" => NetMode::Energy,
        other => return Err(Error::Config(format!("unknown mode '{other}'"))),
    };
    let input_dim = 2;
    let config = MlpConfig {
        input_dim,
        hidden: cfg.hidden_dims()?,
        activation: Activation::Softplus,
        output_dim: match mode {
            NetMode::Score => input_dim,
            NetMode::Energy => 1,
        },
        time_conditional: cfg.sde != "none",
    };
    Ok((config, mode))
}

fn schedule_for(cfg: &RunConfig) -> Result<Option<SdeSchedule>> {
    match cfg.sde.as_str() {
        "ve" => Ok(Some(SdeSchedule::ve())),
        "subvp" => Ok(Some(SdeSchedule::subvp())),
        "none" => Ok(None),
        other => Err(Error::Config(format!("unknown sde '{other}'"))),
    }
}

fn objective_spec(cfg: &RunConfig) -> Result<ObjectiveSpec> {
    let mut spec = ObjectiveSpec::new(ObjectiveKind::parse(&cfg.method)?);
    spec.sigma = cfg.sigma;
    spec.epsilon = cfg.epsilon;
    spec.gamma = cfg.gamma;
    spec.mc_samples = cfg.mc_samples;
    spec.validate()?;
    Ok(spec)
}

fn load_net(cfg: &RunConfig) -> Result<ScoreNet> {
    let (shape, mode) = net_shape(cfg)?;
    let mut net = ScoreNet::load(&cfg.ckpt_path(), shape, mode)?;
    if let Some(schedule) = schedule_for(cfg)? {
        net.set_schedule(schedule);
    }
    Ok(net)
}

/// Per-sample accumulation for the exact-trace objectives, which have no
/// vectorized batch form: mean over rows of sm_exact / lcs_exact.
fn exact_batch_loss(
    tape: &mut Tape,
    net: &crate::net::BoundNet,
    x0: &Tensor,
    spec: &ObjectiveSpec,
) -> Result<Tensor> {
    let (rows, d) = match x0.shape() {
        [b, d] => (*b, *d),
        other => return Err(Error::shape("exact_batch_loss", "[B,d]", other)),
    };
    let mut acc: Option<Tensor> = None;
    for r in 0..rows {
        let row = Tensor::vector(&x0.data()[r * d..(r + 1) * d]);
        let term = match spec.kind {
            ObjectiveKind::Sm => objectives::sm_exact(tape, net, &row)?,
            _ => objectives::lcs_exact(tape, net, &row, spec.sigma)?,
        };
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(&prev, &term)?,
        });
    }
    tape.scale(&acc.expect("batch ≥ 1"), 1.0 / rows as f64)
}

fn write_loss_csv(path: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (step, loss) in losses {
        text.push_str(&format!("{step},{loss:.16e}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let spec = objective_spec(cfg)?;
    let schedule = schedule_for(cfg)?;
    if schedule.is_some()
        && matches!(spec.kind, ObjectiveKind::Sm | ObjectiveKind::LcsExact)
    {
        return Err(Error::Config(format!(
            "{} has no time-dependent form; use --sde none or a stochastic objective",
            spec.kind.name()
        )));
    }
    let dataset = Dataset::from_config(cfg)?;
    let (shape, mode) = net_shape(cfg)?;
    let mut net = ScoreNet::init(shape, mode, cfg.seed)?;
    if let Some(s) = &schedule {
        net.set_schedule(s.clone());
    }
    net.set_momentum(cfg.momentum);

    fs::create_dir_all(&cfg.out)?;
    let ckpt = cfg.ckpt_path();
    if let Some(parent) = ckpt.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    net.save(&ckpt)?;

    let mut data_rng = stream_rng(cfg.seed, streams::DATA);
    let mut noise_rng = stream_rng(cfg.seed, streams::NOISE);
    let save_every = (cfg.iters / 10).max(1);
    let mut losses = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        let batch = dataset.sample(cfg.batch, &mut data_rng);
        let x0 = Tensor::matrix(cfg.batch, 2, batch)?;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let loss = match (&schedule, spec.kind) {
            (Some(s), _) => objectives::sdm_loss(&mut tape, &bound, &x0, s, &spec, &mut noise_rng)?,
            (None, ObjectiveKind::Sm | ObjectiveKind::LcsExact) => {
                exact_batch_loss(&mut tape, &bound, &x0, &spec)?
            }
            (None, _) => objectives::batch_loss(&mut tape, &bound, &x0, &spec, &mut noise_rng)?,
        };
        let value = loss.data()[0];
        if !value.is_finite() {
            write_loss_csv(&Path::new(&cfg.out).join("loss.csv"), &losses)?;
            eprintln!(
                "train: non-finite loss at step {step}; last-good checkpoint retained at {}",
                ckpt.display()
            );
            return Err(Error::Diverged { step });
        }
        let grads = bound.grads_flat(&mut tape, &loss)?;
        drop(tape);
        net.sgd_step(&grads, cfg.lr)?;
        losses.push((step, value));
        if (step + 1) % save_every == 0 {
            net.save(&ckpt)?;
            eprintln!("step {:>7} loss {value:.6e}", step + 1);
        }
    }
    net.save(&ckpt)?;
    write_loss_csv(&Path::new(&cfg.out).join("loss.csv"), &losses)?;
    let final_loss = losses.last().map(|(_, l)| *l);
    match final_loss {
        Some(l) => println!(
            "trained method={} iters={} final_loss={l:.6e} ckpt={}",
            cfg.method,
            cfg.iters,
            ckpt.display()
        ),
        None => println!(
            "trained method={} iters=0 ckpt={} (seeded initialization)",
            cfg.method,
            ckpt.display()
        ),
    }
    Ok(0)
}

fn draw_samples(cfg: &RunConfig, net: &ScoreNet) -> Result<Vec<f64>> {
    let d = net.config.input_dim;
    let n = cfg.n;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(cfg.seed, streams::SAMPLER);
    if net.config.time_conditional {
        let schedule = net
            .schedule()
            .ok_or_else(|| Error::ContractViolation("conditional net lost its schedule".into()))?
            .clone();
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            x.extend(schedule.prior_sample(d, &mut rng));
        }
        reverse_em(
            &schedule,
            |xs, t| net.score_plain(xs, xs.len() / d, Some(t)),
            x,
            d,
            cfg.steps,
            1.0,
            &mut rng,
        )
    } else {
        let x = rng::uniform(&mut rng, n * d, -4.0, 4.0);
        langevin(
            |xs| net.score_plain(xs, xs.len() / d, None),
            x,
            d,
            cfg.langevin_eps,
            cfg.steps,
            &mut rng,
        )
    }
}

fn cmd_sample(cfg: &RunConfig) -> Result<i32> {
    let net = load_net(cfg)?;
    let points = draw_samples(cfg, &net)?;
    fs::create_dir_all(&cfg.out)?;
    let out = Path::new(&cfg.out);
    write_points_csv(&out.join("samples.csv"), &points)?;
    let grid = eval::density_grid(&points, -4.0, 4.0, 80)?;
    eval::write_pgm(&grid, &out.join("density.pgm"))?;
    eval::write_counts_csv(&grid, &out.join("density_counts.csv"))?;
    println!("sampled n={} into {}", cfg.n, out.display());
    if cfg.dataset == "checkerboard" && !points.is_empty() {
        let cb = Checkerboard::new();
        println!(
            "on_support_fraction = {:.4}",
            cb.on_support_fraction(&points)
        );
    }
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig) -> Result<i32> {
    if cfg.n == 0 {
        return Err(Error::Config("eval needs n ≥ 1".into()));
    }
    let net = load_net(cfg)?;
    match Dataset::from_config(cfg)? {
        Dataset::Gmm(mix) => {
            let mut rng = stream_rng(cfg.seed, streams::EVAL);
            let points = mix.sample(cfg.n, &mut rng);
            let (extra_var, t_arg) = match net.schedule() {
                Some(s) => (s.marginal_std(T_MIN)?.powi(2), Some(T_MIN)),
                None => (0.0, None),
            };
            let err = eval::score_error(
                |rows, nrows| net.score_plain(rows, nrows, t_arg),
                &mix,
                &points,
                extra_var,
            )?;
            let baseline = eval::zero_net_baseline(&mix, &points, extra_var)?;
            println!("score_error = {err:.6e}");
            println!("zero_net_baseline = {baseline:.6e}");
            println!("ratio = {:.4}", err / baseline);
        }
        Dataset::Checkerboard(cb) => {
            let points = draw_samples(cfg, &net)?;
            let frac = cb.on_support_fraction(&points);
            let occupancy = cb.occupancy_fractions(&points);
            let share = 1.0 / cb.on_cell_count() as f64;
            let min = occupancy.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = occupancy.iter().cloned().fold(0.0, f64::max);
            println!("score_error = n/a (checkerboard has no analytic score; support metrics follow)");
            println!("on_support_fraction = {frac:.4}");
            println!("occupancy_min_ratio = {:.4}", min / share);
            println!("occupancy_max_ratio = {:.4}", max / share);
        }
    }
    Ok(0)
}

fn cmd_bench(cfg: &RunConfig) -> Result<i32> {
    let methods = cfg.method_list();
    if methods.is_empty() {
        return Err(Error::Config("bench needs a non-empty methods list".into()));
    }
    let dataset = Dataset::from_config(cfg)?;
    let mut data_rng = stream_rng(cfg.seed, streams::DATA);
    let data = dataset.sample(cfg.batch, &mut data_rng);
    let (shape, mode) = net_shape(cfg)?;
    if shape.time_conditional {
        return Err(Error::Config(
            "bench times the fixed-σ objectives; use --sde none".into(),
        ));
    }
    let mut reports = Vec::with_capacity(methods.len());
    for method in &methods {
        let mut spec = objective_spec(cfg)?;
        spec.kind = ObjectiveKind::parse(method)?;
        spec.validate()?;
        let mut net = ScoreNet::init(shape.clone(), mode, cfg.seed)?;
        let mut noise_rng = stream_rng(cfg.seed, streams::NOISE);
        let report = eval::bench(
            &mut net,
            &spec,
            &data,
            cfg.batch,
            cfg.bench_steps,
            cfg.lr,
            &mut noise_rng,
        )?;
        reports.push(report);
    }
    println!("{:<10} {:>10} {:>9} {:>6} {:>6}", "method", "mean_ms", "std_ms", "steps", "cov");
    for r in &reports {
        println!(
            "{:<10} {:>10.3} {:>9.3} {:>6} {:>6.3}",
            r.method,
            r.mean_ms,
            r.std_ms,
            r.steps,
            r.cov()
        );
        if r.cov() > 0.25 {
            eprintln!(
                "warning: {} per-step times vary widely (cov {:.2}); machine looks noisy",
                r.method,
                r.cov()
            );
        }
    }
    let mean_of = |name: &str| reports.iter().find(|r| r.method == name).map(|r| r.mean_ms);
    if reports.len() == 1 {
        println!("ordering: single method, nothing to compare");
    } else if let (Some(ssm), Some(fdssm), Some(dsm), Some(lcss)) = (
        mean_of("ssm"),
        mean_of("fdssm"),
        mean_of("dsm"),
        mean_of("lcss"),
    ) {
        let holds = lcss <= 1.1 * dsm && dsm < fdssm && fdssm < ssm;
        println!(
            "ordering: time(lcss) ≤ 1.1·time(dsm) < time(fdssm) < time(ssm) — {}",
            if holds { "holds" } else { "deviates" }
        );
    } else {
        println!("ordering: needs ssm, fdssm, dsm and lcss to compare");
    }
    fs::create_dir_all(&cfg.out)?;
    eval::write_bench_csv(&reports, &Path::new(&cfg.out).join("bench.csv"))?;
    Ok(0)
}

struct CheckOutcome {
    pass: bool,
    statistic: String,
}

fn ok(pass: bool, statistic: String) -> Result<CheckOutcome> {
    Ok(CheckOutcome { pass, statistic })
}

fn linear_net(d: usize, w: &[f64], b: &[f64]) -> Result<ScoreNet> {
    let config = MlpConfig {
        input_dim: d,
        hidden: vec![],
        activation: Activation::Tanh,
        output_dim: d,
        time_conditional: false,
    };
    let mut net = ScoreNet::init(config, NetMode::Score, 0)?;
    net.params_mut()[..d * d].copy_from_slice(w);
    net.params_mut()[d * d..].copy_from_slice(b);
    Ok(net)
}

type LcssFn = fn(
    &mut Tape,
    &crate::net::BoundNet,
    &Tensor,
    f64,
    Option<f64>,
    f64,
    usize,
    &mut ChaCha8Rng,
) -> Result<Tensor>;

fn check_sm_exact_linear(_rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.0, 0.0, -2.0], &[0.0, 0.0])?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = Tensor::vector(&[0.0, 0.0]);
    let value = objectives::sm_exact(&mut tape, &bound, &x)?.data()[0];
    let err = (value + 3.0).abs();
    ok(err < 1e-12, format!("err={err:.2e}"))
}

fn check_ssm_enumeration(_rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.4, 0.4, -2.0], &[0.0, 0.0])?;
    let x = Tensor::vector(&[0.0, 0.0]);
    let mut total = 0.0;
    for signs in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let v = Tensor::vector(&signs);
        let (t1, t2) =
            objectives::ssm_parts(&mut tape, &bound, &x, &v, (2.0f64).sqrt())?;
        total += t1.data()[0] + t2.data()[0];
    }
    let mean = total / 4.0;
    let err = (mean + 1.5).abs();
    ok(err < 1e-12, format!("err={err:.2e}"))
}

fn check_fdssm_first_term(_rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.3, 0.3, -2.0], &[0.1, -0.2])?;
    let x = Tensor::vector(&[0.7, -0.4]);
    let v = Tensor::vector(&[0.05, -0.02]);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let (ssm_t1, _) = objectives::ssm_parts(&mut tape, &bound, &x, &v, 0.1)?;
    let (fd_t1, _) = objectives::fd_ssm_parts(&mut tape, &bound, &x, &v, 0.1)?;
    let diff = (ssm_t1.data()[0] - fd_t1.data()[0]).abs();
    ok(diff < 1e-10, format!("diff={diff:.2e}"))
}

fn check_dsm_target(_rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let target = objectives::dsm_target(&[1.0, 0.0], &[1.5, 0.0], 0.5);
    let err = (target[0] + 2.0).abs().max(target[1].abs());
    ok(err == 0.0, format!("err={err:.2e}"))
}

fn check_lcss_vs_lcs_exact(rng: &mut ChaCha8Rng, mutate: bool) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.0, 0.0, -2.0], &[0.0, 0.0])?;
    let x = Tensor::vector(&[1.0, 1.0]);
    let sigma = 0.5;
    let exact = {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        objectives::lcs_exact(&mut tape, &bound, &x, sigma)?.data()[0]
    };
    let f: LcssFn = if mutate {
        objectives::lcss_mutated
    } else {
        objectives::lcss
    };
    let n = 4000usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let v = f(&mut tape, &bound, &x, sigma, None, 1.0, 1, rng)?.data()[0];
        sum += v;
        sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq / nf - mean * mean).max(0.0);
    let se = (var / nf).sqrt();
    let z = if se > 0.0 {
        (mean - exact).abs() / se
    } else if mean == exact {
        0.0
    } else {
        f64::INFINITY
    };
    ok(z <= 4.0, format!("z={z:.2}"))
}

fn check_lcss_gamma_neutral(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.3, 0.3, -2.0], &[0.05, -0.1])?;
    let x = Tensor::vector(&[0.3, -0.7]);
    let sigma = 0.4;
    let mut rng_b = rng.clone();
    let a = {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        objectives::lcss(&mut tape, &bound, &x, sigma, None, 1.0, 1, rng)?.data()[0]
    };
    let b = {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let z = Tensor::vector(&rng::standard_normal(&mut rng_b, 2));
        let x_on = tape.ensure(&x)?;
        let diff = tape.scale(&z, sigma)?;
        let xp = tape.add(&x_on, &diff)?;
        let s = bound.forward(&mut tape, &xp, None)?;
        let ip = tape.inner(&s, &diff)?;
        let t1 = tape.scale(&ip, 1.0 / (sigma * sigma))?;
        let norm = tape.sqnorm(&s)?;
        let t2 = tape.scale(&norm, 0.5)?;
        tape.add(&t1, &t2)?.data()[0]
    };
    let diff = (a - b).abs();
    ok(diff == 0.0, format!("diff={diff:.2e}"))
}

fn check_sdm_finite_at_tmin(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let kinds = [
        ObjectiveKind::Dsm,
        ObjectiveKind::Lcss,
        ObjectiveKind::Ssm,
        ObjectiveKind::FdSsm,
    ];
    let mut worst: f64 = 0.0;
    for schedule in [SdeSchedule::ve(), SdeSchedule::subvp()] {
        let config = MlpConfig {
            input_dim: 2,
            hidden: vec![8],
            activation: Activation::Softplus,
            output_dim: 2,
            time_conditional: true,
        };
        let mut net = ScoreNet::init(config, NetMode::Score, 3)?;
        net.set_schedule(schedule.clone());
        let x0 = Tensor::matrix(4, 2, rng::standard_normal(rng, 8))?;
        for kind in kinds {
            let mut spec = ObjectiveSpec::new(kind);
            spec.sigma = 0.1;
            spec.epsilon = 0.1;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let ts = [T_MIN; 4];
            let loss =
                objectives::sdm_loss_at_times(&mut tape, &bound, &x0, &ts, &schedule, &spec, rng)?;
            let value = loss.data()[0];
            if !value.is_finite() {
                return ok(false, format!("non-finite {} loss at t_min", kind.name()));
            }
            worst = worst.max(value.abs());
        }
    }
    ok(true, format!("max_abs={worst:.2e}"))
}

fn check_stein_identity(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let f = SteinFn::new(2, |x, _| x.to_vec(), |x, _| vec![1.0; x.len()]);
    let report = eval::stein_check(&f, &[0.3, -0.2], 0.8, 200_000, rng)?;
    ok(
        report.max_standardized < 4.0,
        format!("max_z={:.2}", report.max_standardized),
    )
}

fn check_stein_square(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let f = SteinFn::new(
        2,
        |x, _| x.iter().map(|v| v * v).collect(),
        |x, _| x.iter().map(|v| 2.0 * v).collect(),
    );
    let report = eval::stein_check(&f, &[0.3, -0.2], 0.8, 200_000, rng)?;
    ok(
        report.max_standardized < 4.0,
        format!("max_z={:.2}", report.max_standardized),
    )
}

fn check_stein_mlp(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let config = MlpConfig {
        input_dim: 2,
        hidden: vec![16, 16],
        activation: Activation::Softplus,
        output_dim: 2,
        time_conditional: false,
    };
    let net = ScoreNet::init(config, NetMode::Score, 5)?;
    let f = SteinFn::from_net(&net)?;
    let report = eval::stein_check(&f, &[0.0, 0.0], 1.0, 100_000, rng)?;
    ok(
        report.max_standardized < 4.0,
        format!("max_z={:.2}", report.max_standardized),
    )
}

fn check_trace_slope(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.0, 0.0, -2.0], &[0.0, 0.0])?;
    let report =
        eval::lcss_trace_convergence(&net, &[0.5, -0.5], 0.1, &[100, 1000, 10_000], 30, rng)?;
    let slope_ok = report.slope > -0.65 && report.slope < -0.35;
    let ref_ok = (report.reference + 3.0).abs() < 1e-6;
    ok(slope_ok && ref_ok, format!("slope={:.3}", report.slope))
}

fn check_hutchinson_decay(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let a = [1.0, 0.7, -0.3, 0.5];
    let report = objectives::hutchinson_error_bound_check(&a, 2, 100, 2000, rng)?;
    ok(
        report.decay_ratio > 1.6 && report.decay_ratio < 2.4,
        format!("decay_ratio={:.2}", report.decay_ratio),
    )
}

fn check_interchange(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let net = linear_net(2, &[-1.0, 0.0, 0.0, -0.5], &[0.0, 0.0])?;
    let report = eval::interchange_check(&net, &[0.2, 0.1], 0.3, 20_000, rng)?;
    ok(
        report.crn_discrepancy < 1e-9,
        format!("crn={:.2e}", report.crn_discrepancy),
    )
}

fn check_reverse_em_moments(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let ve = SdeSchedule::ve();
    let chains = 4000usize;
    let d = 2usize;
    let mut x = Vec::with_capacity(chains * d);
    for _ in 0..chains {
        x.extend(ve.prior_sample(d, rng));
    }
    let out = reverse_em(
        &ve,
        |xs, t| {
            let s2 = 1.0 + ve.marginal_std(t)?.powi(2);
            Ok(xs.iter().map(|&v| -v / s2).collect())
        },
        x,
        d,
        500,
        1.0,
        rng,
    )?;
    let n = (chains * d) as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
    ok(
        mean.abs() < 0.08 && (var - 1.0).abs() < 0.12,
        format!("mean={mean:.3} var={var:.3}"),
    )
}

fn check_langevin_stationary(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let chains = 5000usize;
    let eps = 0.1;
    let x0 = rng::uniform(rng, chains, -4.0, 4.0);
    let out = langevin(|x| Ok(x.iter().map(|&v| -v).collect()), x0, 1, eps, 1000, rng)?;
    let n = chains as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
    let target = 1.0 / (1.0 - eps / 4.0);
    let rel = (var - target).abs() / target;
    ok(rel < 0.12, format!("rel_err={rel:.3}"))
}

fn check_checkpoint_roundtrip(_rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let config = MlpConfig {
        input_dim: 2,
        hidden: vec![16, 16],
        activation: Activation::Softplus,
        output_dim: 2,
        time_conditional: false,
    };
    let net = ScoreNet::init(config.clone(), NetMode::Score, 11)?;
    let path = std::env::temp_dir().join(format!("smlab-validate-{}.ckpt", std::process::id()));
    net.save(&path)?;
    let back = ScoreNet::load(&path, config, NetMode::Score);
    let _ = fs::remove_file(&path);
    let back = back?;
    let max_diff = net
        .params()
        .iter()
        .zip(back.params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    ok(max_diff == 0.0, format!("max_diff={max_diff:.2e}"))
}

fn check_config_roundtrip(_rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut cfg = RunConfig::default();
    cfg.seed = 99;
    cfg.lr = 2.5e-4;
    cfg.sde = "subvp".into();
    cfg.hidden = "32,32".into();
    let text = cfg.canonical();
    let back = RunConfig::parse_str(&text)?;
    let stable = back == cfg && back.canonical() == text;
    ok(stable, if stable { "stable".into() } else { "mismatch".into() })
}

fn cmd_validate(cfg: &RunConfig, mutate_lcss: bool) -> Result<i32> {
    type Check<'m> = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Result<CheckOutcome> + 'm>);
    let boxed = |f: fn(&mut ChaCha8Rng) -> Result<CheckOutcome>| -> Box<dyn Fn(&mut ChaCha8Rng) -> Result<CheckOutcome>> {
        Box::new(f)
    };
    let checks: Vec<Check> = vec![
        ("sm_exact_linear", boxed(check_sm_exact_linear)),
        ("ssm_enumeration", boxed(check_ssm_enumeration)),
        ("fdssm_first_term", boxed(check_fdssm_first_term)),
        ("dsm_target", boxed(check_dsm_target)),
        (
            "lcss_vs_lcs_exact",
            Box::new(move |rng: &mut ChaCha8Rng| check_lcss_vs_lcs_exact(rng, mutate_lcss)),
        ),
        ("lcss_gamma_neutral", boxed(check_lcss_gamma_neutral)),
        ("sdm_finite_at_tmin", boxed(check_sdm_finite_at_tmin)),
        ("stein_identity", boxed(check_stein_identity)),
        ("stein_square", boxed(check_stein_square)),
        ("stein_mlp", boxed(check_stein_mlp)),
        ("trace_slope", boxed(check_trace_slope)),
        ("hutchinson_decay", boxed(check_hutchinson_decay)),
        ("interchange_orderings", boxed(check_interchange)),
        ("reverse_em_moments", boxed(check_reverse_em_moments)),
        ("langevin_stationary", boxed(check_langevin_stationary)),
        ("checkpoint_roundtrip", boxed(check_checkpoint_roundtrip)),
        ("config_roundtrip", boxed(check_config_roundtrip)),
    ];
    let total = checks.len();
    let mut passed = 0usize;
    for (idx, (name, check)) in checks.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed.wrapping_add(idx as u64), streams::EVAL);
        let outcome = check(&mut rng)?;
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{name} {status} {}", outcome.statistic);
        if outcome.pass {
            passed += 1;
        }
    }
    eprintln!("{passed}/{total} checks passed");
    Ok(if passed == total { 0 } else { 1 })
}
