//! Run configuration: defaults, TOML file, `RETA_*` environment variables and
//! explicit overrides, applied in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::AdamW;
use crate::error::{Error, Result};

/// Prefix of the environment variables that override config keys.
pub const ENV_PREFIX: &str = "RETA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Adjacent text embeddings per class (M).
    pub adjacent: usize,
    /// Retained singular vectors (n), clamped to the rank available from the
    /// prompts.
    pub svd_rank: usize,
    /// Cache entries per class (SZ).
    pub cache_size: usize,
    /// Consistency penalty (γ), at least 1.
    pub gamma: f64,
    /// Softmax temperature (τ).
    pub tau: f64,
    /// Normalized-entropy threshold of the view filter (δ).
    pub delta: f64,
    /// Normalized-entropy gate for global merges (τ_c).
    pub tau_c: f64,
    /// Surrogate loss weight (λ1).
    pub lambda1: f64,
    /// Alignment loss weight (λ2).
    pub lambda2: f64,
    /// Gaussian-branch fusion weight (η). Values in [0.2, 0.6] work well.
    pub eta: f64,
    /// Cache modulating scale (α).
    pub alpha: f64,
    /// Cache modulating sharpness (β).
    pub beta: f64,
    /// Optimizer learning rate.
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Optimizer epsilon.
    pub adam_eps: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    pub seed: u64,
    pub enable_cer: bool,
    pub enable_ddc: bool,
    pub enable_cache: bool,
    /// One merge counter per class instead of a single global counter.
    pub per_class_counter: bool,
    /// Cache-purity trace cadence, in records.
    pub purity_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            adjacent: 3,
            svd_rank: 64,
            cache_size: 3,
            gamma: 2.0,
            tau: 0.01,
            delta: 0.1,
            tau_c: 0.1,
            lambda1: 0.3,
            lambda2: 0.02,
            eta: 0.4,
            alpha: 1.0,
            beta: 5.0,
            lr: 5e-4,
            weight_decay: 0.1,
            adam_eps: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            enable_cer: true,
            enable_ddc: true,
            enable_cache: true,
            per_class_counter: false,
            purity_every: 50,
        }
    }
}

/// Every settable key, in declaration order.
pub const CONFIG_KEYS: &[&str] = &[
    "adjacent",
    "svd_rank",
    "cache_size",
    "gamma",
    "tau",
    "delta",
    "tau_c",
    "lambda1",
    "lambda2",
    "eta",
    "alpha",
    "beta",
    "lr",
    "weight_decay",
    "adam_eps",
    "beta1",
    "beta2",
    "seed",
    "enable_cer",
    "enable_ddc",
    "enable_cache",
    "per_class_counter",
    "purity_every",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    /// Reads a TOML file on top of the defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = message
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            Error::config(key, message)
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Sets one key from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "adjacent" => self.adjacent = parse(key, value)?,
            "svd_rank" => self.svd_rank = parse(key, value)?,
            "cache_size" => self.cache_size = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "tau_c" => self.tau_c = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "enable_cer" => self.enable_cer = parse_bool(key, value)?,
            "enable_ddc" => self.enable_ddc = parse_bool(key, value)?,
            "enable_cache" => self.enable_cache = parse_bool(key, value)?,
            "per_class_counter" => self.per_class_counter = parse_bool(key, value)?,
            "purity_every" => self.purity_every = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `RETA_<KEY>` variables from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (name, value) in vars {
            let Some(rest) = name.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase();
            if CONFIG_KEYS.contains(&key.as_str()) {
                self.set(&key, value.as_ref())?;
            }
        }
        Ok(())
    }

    /// Defaults < file < environment < explicit overrides, then validation.
    pub fn load<I, K, V>(path: Option<&Path>, env: I, overrides: &[(String, String)]) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut config = match path {
            Some(p) => Self::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        config.apply_env(env)?;
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, rule: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, rule))
            }
        };
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check(self.adjacent >= 1, "adjacent", "must be >= 1")?;
        check(self.svd_rank >= 1, "svd_rank", "must be >= 1")?;
        check(self.cache_size >= 1, "cache_size", "must be >= 1")?;
        check(self.gamma >= 1.0 && self.gamma.is_finite(), "gamma", "must be >= 1")?;
        check(positive(self.tau), "tau", "must be > 0")?;
        check(unit(self.delta), "delta", "must be in [0, 1]")?;
        check(unit(self.tau_c), "tau_c", "must be in [0, 1]")?;
        check(self.lambda1 >= 0.0 && self.lambda1.is_finite(), "lambda1", "must be >= 0")?;
        check(self.lambda2 >= 0.0 && self.lambda2.is_finite(), "lambda2", "must be >= 0")?;
        check(self.eta >= 0.0 && self.eta.is_finite(), "eta", "must be >= 0")?;
        check(positive(self.alpha), "alpha", "must be > 0")?;
        check(positive(self.beta), "beta", "must be > 0")?;
        check(positive(self.lr), "lr", "must be > 0")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be >= 0",
        )?;
        check(positive(self.adam_eps), "adam_eps", "must be > 0")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check(self.purity_every >= 1, "purity_every", "must be >= 1")?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
