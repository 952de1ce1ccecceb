//! Run configuration as flat `key = value` text.
//!
//! Lines are `section.field = value`; `#` starts a comment. A `profile` key
//! is applied before every other key, so explicit keys override it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::denoiser::DenoiserConfig;
use crate::engine::SchedulerConfig;
use crate::error::{Error, Result};
use crate::oracle::{OracleConfig, OracleMode, ENDPOINT_ENV};

/// The packaged demonstration configuration.
pub const DEMO_CONFIG: &str = include_str!("../assets/demo.conf");

pub const PROFILES: [&str; 2] = ["sdxl-like", "dit-like"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Option<String>,
    pub prompt: String,
    /// Seed for the initial latent.
    pub seed: u64,
    pub denoiser: DenoiserConfig,
    pub scheduler: SchedulerConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: None,
            prompt: "a black dog and a white dog".into(),
            seed: 0,
            denoiser: DenoiserConfig::default(),
            scheduler: SchedulerConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_window(value: &str) -> Result<BTreeSet<usize>> {
    let value = value.trim();
    if value == "none" {
        return Ok(BTreeSet::new());
    }
    if let Some(n) = value.strip_prefix("first:") {
        let n: usize = parse_num("scheduler.window", n.trim())?;
        return Ok((1..=n).collect());
    }
    let steps: BTreeSet<usize> = parse_list("scheduler.window", value)?.into_iter().collect();
    if steps.is_empty() {
        return Err(Error::Config("scheduler.window: empty list, use \"none\"".into()));
    }
    Ok(steps)
}

fn format_window(window: &BTreeSet<usize>) -> String {
    if window.is_empty() {
        "none".into()
    } else if window.iter().copied().eq(1..=window.len()) {
        format!("first:{}", window.len())
    } else {
        join(window)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_concepts(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Splits `text` into `(key, value)` pairs, rejecting malformed lines and
/// duplicate keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = k.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::default();
        if let Some((k, v)) = pairs.iter().find(|(k, _)| k == "profile") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Resolves `demo`, a profile name, or a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if name_or_path == "demo" {
            return Self::parse(DEMO_CONFIG);
        }
        if PROFILES.contains(&name_or_path) {
            let mut cfg = Self::default();
            cfg.set("profile", name_or_path)?;
            return Ok(cfg);
        }
        Self::load(Path::new(name_or_path))
    }

    /// Fills a missing oracle endpoint from the environment.
    pub fn apply_env(&mut self) {
        if self.oracle.endpoint.is_none() {
            if let Ok(url) = std::env::var(ENDPOINT_ENV) {
                if !url.trim().is_empty() {
                    self.oracle.endpoint = Some(url.trim().to_string());
                }
            }
        }
    }

    fn apply_profile(&mut self, name: &str) -> Result<()> {
        let (steps, alpha_max, lr) = match name {
            "sdxl-like" => (40, 0.04, 0.001),
            "dit-like" => (28, 3.0, 0.002),
            _ => return Err(Error::Config(format!("unknown profile {name:?}"))),
        };
        self.denoiser.steps = steps;
        self.scheduler.alpha_max = alpha_max;
        self.scheduler.learning_rate = lr;
        self.profile = Some(name.to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.denoiser;
        let s = &mut self.scheduler;
        let o = &mut self.oracle;
        match key {
            "profile" => self.apply_profile(value)?,
            "prompt" => self.prompt = value.to_string(),
            "seed" => self.seed = parse_num(key, value)?,

            "denoiser.layers" => d.layers = parse_num(key, value)?,
            "denoiser.heads" => d.heads = parse_num(key, value)?,
            "denoiser.d_model" => d.d_model = parse_num(key, value)?,
            "denoiser.n_queries" => d.n_queries = parse_num(key, value)?,
            "denoiser.steps" => d.steps = parse_num(key, value)?,
            "denoiser.update_rate" => d.update_rate = parse_num(key, value)?,
            "denoiser.latent_scale" => d.latent_scale = parse_num(key, value)?,
            "denoiser.latent_shift" => d.latent_shift = parse_num(key, value)?,
            "denoiser.seed" => d.seed = parse_num(key, value)?,

            "scheduler.alpha_max" => s.alpha_max = parse_num(key, value)?,
            "scheduler.lambda" => s.lambda = parse_num(key, value)?,
            "scheduler.learning_rate" => s.learning_rate = parse_num(key, value)?,
            "scheduler.iterations" => s.iterations = parse_num(key, value)?,
            "scheduler.beta1" => s.beta1 = parse_num(key, value)?,
            "scheduler.beta2" => s.beta2 = parse_num(key, value)?,
            "scheduler.eps" => s.eps = parse_num(key, value)?,
            "scheduler.window" => s.window = parse_window(value)?,
            "scheduler.augmented_layers" => {
                s.augmented_layers = match value {
                    "all" => None,
                    _ => Some(parse_list(key, value)?.into_iter().collect()),
                }
            }
            "scheduler.warm_start" => s.warm_start = parse_bool(key, value)?,

            "oracle.mode" => {
                o.mode = match value {
                    "threshold" => OracleMode::Threshold,
                    "remote" => OracleMode::Remote,
                    "fixed" => OracleMode::Fixed,
                    _ => return Err(Error::Config(format!("oracle.mode: unknown mode {value:?}"))),
                }
            }
            "oracle.rho" => o.rho = parse_num(key, value)?,
            "oracle.window" => o.window = parse_num(key, value)?,
            "oracle.endpoint" => o.endpoint = (!value.is_empty()).then(|| value.to_string()),
            "oracle.timeout_ms" => o.timeout_ms = parse_num(key, value)?,
            "oracle.top_k" => {
                o.top_k = match value {
                    "none" | "" => None,
                    _ => Some(parse_num(key, value)?),
                }
            }
            "oracle.missing" => o.fixed_missing = parse_concepts(value),
            "oracle.present" => o.fixed_present = parse_concepts(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Config("prompt is empty".into()));
        }
        self.denoiser.validate()?;
        self.scheduler.validate(self.denoiser.steps, self.denoiser.layers)?;
        self.oracle.validate(self.denoiser.steps)
    }

    /// Every key with its effective value, sorted by key.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let d = &self.denoiser;
        let s = &self.scheduler;
        let o = &self.oracle;
        let mode = match o.mode {
            OracleMode::Threshold => "threshold",
            OracleMode::Remote => "remote",
            OracleMode::Fixed => "fixed",
        };
        let entries: Vec<(&str, String)> = vec![
            ("profile", self.profile.clone().unwrap_or_else(|| "none".into())),
            ("prompt", self.prompt.clone()),
            ("seed", self.seed.to_string()),
            ("denoiser.layers", d.layers.to_string()),
            ("denoiser.heads", d.heads.to_string()),
            ("denoiser.d_model", d.d_model.to_string()),
            ("denoiser.n_queries", d.n_queries.to_string()),
            ("denoiser.steps", d.steps.to_string()),
            ("denoiser.update_rate", d.update_rate.to_string()),
            ("denoiser.latent_scale", d.latent_scale.to_string()),
            ("denoiser.latent_shift", d.latent_shift.to_string()),
            ("denoiser.seed", d.seed.to_string()),
            ("scheduler.alpha_max", s.alpha_max.to_string()),
            ("scheduler.lambda", s.lambda.to_string()),
            ("scheduler.learning_rate", s.learning_rate.to_string()),
            ("scheduler.iterations", s.iterations.to_string()),
            ("scheduler.beta1", s.beta1.to_string()),
            ("scheduler.beta2", s.beta2.to_string()),
            ("scheduler.eps", s.eps.to_string()),
            ("scheduler.window", format_window(&s.window)),
            (
                "scheduler.augmented_layers",
                s.augmented_layers.as_ref().map_or_else(|| "all".into(), join),
            ),
            ("scheduler.warm_start", s.warm_start.to_string()),
            ("oracle.mode", mode.into()),
            ("oracle.rho", o.rho.to_string()),
            ("oracle.window", o.window.to_string()),
            ("oracle.endpoint", o.endpoint.clone().unwrap_or_default()),
            ("oracle.timeout_ms", o.timeout_ms.to_string()),
            ("oracle.top_k", o.top_k.map_or_else(|| "none".into(), |k| k.to_string())),
            ("oracle.missing", o.fixed_missing.join(",")),
            ("oracle.present", o.fixed_present.join(",")),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The echo rendered as config text. Parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut echo = self.echo();
        // Reapplying a profile would clobber explicit values that follow it.
        echo.remove("profile");
        let mut out = String::new();
        for (k, v) in echo {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
