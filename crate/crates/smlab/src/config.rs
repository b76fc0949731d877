//! Run configuration: every knob has a default, values load from a
//! line-oriented `key = value` file (`#` comments), command-line flags
//! override the file, and the canonical text form round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: String,
    pub sde: String,
    pub dataset: String,
    pub mode: String,
    pub seed: u64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub mc_samples: usize,
    pub hidden: String,
    pub steps: usize,
    pub langevin_eps: f64,
    pub n: usize,
    pub out: String,
    pub ckpt: String,
    pub methods: String,
    pub bench_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: "lcss".into(),
            sde: "none".into(),
            dataset: "checkerboard".into(),
            mode: "score".into(),
            seed: 0,
            iters: 20_000,
            batch: 10_000,
            lr: 1e-3,
            momentum: 0.0,
            sigma: 0.1,
            epsilon: 0.1,
            gamma: 1.0,
            mc_samples: 1,
            hidden: "300,300".into(),
            steps: 1000,
            langevin_eps: 0.1,
            n: 10_000,
            out: "out".into(),
            ckpt: String::new(),
            methods: "ssm,fdssm,dsm,lcss".into(),
            bench_steps: 500,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("config key '{key}': bad value '{value}': {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = value.to_string(),
            "sde" => self.sde = value.to_string(),
            "dataset" => self.dataset = value.to_string(),
            "mode" => self.mode = value.to_string(),
            "seed" => self.seed = parse_num(key, value)?,
            "iters" => self.iters = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "mc_samples" => self.mc_samples = parse_num(key, value)?,
            "hidden" => self.hidden = value.to_string(),
            "steps" => self.steps = parse_num(key, value)?,
            "langevin_eps" => self.langevin_eps = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "out" => self.out = value.to_string(),
            "ckpt" => self.ckpt = value.to_string(),
            "methods" => self.methods = value.to_string(),
            "bench_steps" => self.bench_steps = parse_num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_str(text)?;
        Ok(config)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected 'key = value'", idx + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Canonical text form: every key, sorted, one `key = value` line each.
    /// `parse_str(canonical())` reproduces the config exactly, and
    /// canonicalization is idempotent.
    pub fn canonical(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("batch", self.batch.to_string()),
            ("bench_steps", self.bench_steps.to_string()),
            ("ckpt", self.ckpt.clone()),
            ("dataset", self.dataset.clone()),
            ("epsilon", self.epsilon.to_string()),
            ("gamma", self.gamma.to_string()),
            ("hidden", self.hidden.clone()),
            ("iters", self.iters.to_string()),
            ("langevin_eps", self.langevin_eps.to_string()),
            ("lr", self.lr.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("method", self.method.clone()),
            ("methods", self.methods.clone()),
            ("mode", self.mode.clone()),
            ("momentum", self.momentum.to_string()),
            ("n", self.n.to_string()),
            ("out", self.out.clone()),
            ("sde", self.sde.clone()),
            ("seed", self.seed.to_string()),
            ("sigma", self.sigma.to_string()),
            ("steps", self.steps.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (key, value) in pairs {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let one_of = |key: &str, value: &str, allowed: &[&str]| -> Result<()> {
            if allowed.contains(&value) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{key} must be one of {allowed:?}, got '{value}'"
                )))
            }
        };
        one_of(
            "method",
            &self.method,
            &["sm", "ssm", "fdssm", "dsm", "lcs", "lcss"],
        )?;
        one_of("sde", &self.sde, &["ve", "subvp", "none"])?;
        one_of("dataset", &self.dataset, &["checkerboard", "gmm"])?;
        one_of("mode", &self.mode, &["score", "energy"])?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.momentum >= 0.0) || self.momentum >= 1.0 {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be ≥ 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.langevin_eps > 0.0) {
            return Err(Error::Config(format!(
                "langevin_eps must be positive, got {}",
                self.langevin_eps
            )));
        }
        self.hidden_dims()?;
        Ok(())
    }

    pub fn hidden_dims(&self) -> Result<Vec<usize>> {
        let trimmed = self.hidden.trim();
        if trimmed.is_empty() {
            return Ok(vec![]);
        }
        trimmed
            .split(',')
            .map(|s| parse_num("hidden", s.trim()))
            .collect()
    }

    pub fn method_list(&self) -> Vec<String> {
        self.methods
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Checkpoint path: explicit `ckpt` if set, else `<out>/model.ckpt`.
    pub fn ckpt_path(&self) -> std::path::PathBuf {
        if self.ckpt.is_empty() {
            Path::new(&self.out).join("model.ckpt")
        } else {
            Path::new(&self.ckpt).to_path_buf()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn canonical_round_trips_exactly() {
        let mut config = RunConfig::default();
        config.seed = 1234;
        config.lr = 5e-4;
        config.hidden = "16,16".into();
        config.sde = "ve".into();
        let text = config.canonical();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn parse_skips_comments_and_blanks() {
        let text = "# a comment\n\nseed = 7\n  method = dsm  \n";
        let config = RunConfig::parse_str(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.method, "dsm");
        assert_eq!(config.batch, RunConfig::default().batch);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        assert!(RunConfig::parse_str("nope = 1").is_err());
        assert!(RunConfig::parse_str("seed = banana").is_err());
        assert!(RunConfig::parse_str("seed 7").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut config = RunConfig::default();
        config.method = "mystery".into();
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.lr = 0.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.momentum = 1.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.hidden = "16,x".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hidden_dims_parse() {
        let mut config = RunConfig::default();
        assert_eq!(config.hidden_dims().unwrap(), vec![300, 300]);
        config.hidden = "".into();
        assert_eq!(config.hidden_dims().unwrap(), Vec::<usize>::new());
        config.hidden = "8, 4".into();
        assert_eq!(config.hidden_dims().unwrap(), vec![8, 4]);
    }

    #[test]
    fn ckpt_path_defaults_into_out_dir() {
        let mut config = RunConfig::default();
        config.out = "runs/a".into();
        assert_eq!(config.ckpt_path(), Path::new("runs/a").join("model.ckpt"));
        config.ckpt = "elsewhere.ckpt".into();
        assert_eq!(config.ckpt_path(), Path::new("elsewhere.ckpt"));
    }
}
