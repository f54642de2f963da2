//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to the library default; unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lago::two_stage::ConfidenceMode;
use lago::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub rng_seed: u64,
}

pub const KEYS: &[&str] = &[
    "coarse_steps",
    "coarse_delta",
    "coarse_rho",
    "fine_steps",
    "fine_delta",
    "fine_rho",
    "epsilon",
    "search_k",
    "tau_search",
    "min_box",
    "confidence_mode",
    "confidence_temperature",
    "c_lo",
    "c_hi",
    "gamma_min",
    "gamma_max",
    "k1",
    "n1",
    "k_global",
    "k_final",
    "prototype_temperature",
    "tau_v",
    "tau_t",
    "beta",
    "alpha_dc",
    "lambda",
    "tau_rand",
    "views",
    "random_scale_min",
    "random_scale_max",
    "filter_against_full",
    "template_temperature",
    "rng_seed",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let s = &mut p.two_stage.search;
        let a = &mut p.aggregation;
        match key {
            "coarse_steps" => s.coarse.steps = num(key, value)?,
            "coarse_delta" => s.coarse.delta = num(key, value)?,
            "coarse_rho" => s.coarse.rho = num(key, value)?,
            "fine_steps" => s.fine.steps = num(key, value)?,
            "fine_delta" => s.fine.delta = num(key, value)?,
            "fine_rho" => s.fine.rho = num(key, value)?,
            "epsilon" => s.epsilon = num(key, value)?,
            "search_k" => s.k = num(key, value)?,
            "tau_search" => s.tau_search = num(key, value)?,
            "min_box" => s.min_box = num(key, value)?,
            "confidence_mode" => {
                p.two_stage.confidence.mode = match value {
                    "margin" => ConfidenceMode::Margin,
                    "softmax_max" => ConfidenceMode::SoftmaxMax,
                    _ => bail!("confidence_mode must be margin or softmax_max, got {value:?}"),
                }
            }
            "confidence_temperature" => p.two_stage.confidence.temperature = num(key, value)?,
            "c_lo" => p.two_stage.gamma.c_lo = num(key, value)?,
            "c_hi" => p.two_stage.gamma.c_hi = num(key, value)?,
            "gamma_min" => p.two_stage.gamma.gamma_min = num(key, value)?,
            "gamma_max" => p.two_stage.gamma.gamma_max = num(key, value)?,
            "k1" => p.two_stage.k1 = num(key, value)?,
            "n1" => p.two_stage.n1 = num(key, value)?,
            "k_global" => p.two_stage.k_global = num(key, value)?,
            "k_final" => p.two_stage.k_final = num(key, value)?,
            "prototype_temperature" => p.two_stage.prototype_temperature = num(key, value)?,
            "tau_v" => a.tau_v = num(key, value)?,
            "tau_t" => a.tau_t = num(key, value)?,
            "beta" => a.beta = num(key, value)?,
            "alpha_dc" => a.alpha_dc = num(key, value)?,
            "lambda" => a.lambda = num(key, value)?,
            "tau_rand" => a.tau_rand = num(key, value)?,
            "views" => a.views = num(key, value)?,
            "random_scale_min" => a.random_scale.0 = num(key, value)?,
            "random_scale_max" => a.random_scale.1 = num(key, value)?,
            "filter_against_full" => a.filter_against_full = num(key, value)?,
            "template_temperature" => {
                p.template_temperature = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "rng_seed" => self.rng_seed = num(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key {key:?}", n + 1);
            }
            cfg.set(key, value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    /// Renders every key with its current value, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let p = &self.pipeline;
        let s = &p.two_stage.search;
        let a = &p.aggregation;
        let mode = match p.two_stage.confidence.mode {
            ConfidenceMode::Margin => "margin",
            ConfidenceMode::SoftmaxMax => "softmax_max",
        };
        let template = p
            .template_temperature
            .map_or("none".to_string(), |t| t.to_string());
        let values: [String; 33] = [
            s.coarse.steps.to_string(),
            s.coarse.delta.to_string(),
            s.coarse.rho.to_string(),
            s.fine.steps.to_string(),
            s.fine.delta.to_string(),
            s.fine.rho.to_string(),
            s.epsilon.to_string(),
            s.k.to_string(),
            s.tau_search.to_string(),
            s.min_box.to_string(),
            mode.to_string(),
            p.two_stage.confidence.temperature.to_string(),
            p.two_stage.gamma.c_lo.to_string(),
            p.two_stage.gamma.c_hi.to_string(),
            p.two_stage.gamma.gamma_min.to_string(),
            p.two_stage.gamma.gamma_max.to_string(),
            p.two_stage.k1.to_string(),
            p.two_stage.n1.to_string(),
            p.two_stage.k_global.to_string(),
            p.two_stage.k_final.to_string(),
            p.two_stage.prototype_temperature.to_string(),
            a.tau_v.to_string(),
            a.tau_t.to_string(),
            a.beta.to_string(),
            a.alpha_dc.to_string(),
            a.lambda.to_string(),
            a.tau_rand.to_string(),
            a.views.to_string(),
            a.random_scale.0.to_string(),
            a.random_scale.1.to_string(),
            a.filter_against_full.to_string(),
            template,
            self.rng_seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}
