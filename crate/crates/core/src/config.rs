//! Experiment configuration.
//!
//! A config is a TOML document with the sections `env`, `discovery`, `model`,
//! `explorer` and `output`. Every field is optional, unknown keys are rejected,
//! and dotted-path overrides (`explorer.eta=0.2`) are applied on top of the
//! file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::TransitionKind;
use crate::error::{Error, Result};
use crate::kci::NullMethod;
use crate::nn::Activation;
use crate::world_model::{Arch, GradientSource, OptimizerMode};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "CAUSEX_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub discovery: DiscoveryConfig,
    pub model: ModelConfig,
    pub explorer: ExplorerConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n: usize,
    pub c: usize,
    pub edge_keep_prob: f64,
    pub transition: TransitionKind,
    /// Master seed of the whole run.
    pub seed: u64,
    pub catalog_size: usize,
    /// Global step at which the ground-truth structure is redrawn once.
    pub change_at: Option<u64>,
    /// Start from a perturbed copy of the true graph until the first discovery.
    pub underestimation: bool,
    pub flip_prob: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n: 10,
            c: 2,
            edge_keep_prob: 0.2,
            transition: TransitionKind::Linear,
            seed: 0,
            catalog_size: crate::env::DEFAULT_CATALOG_SIZE,
            change_at: None,
            underestimation: false,
            flip_prob: 0.8,
        }
    }
}

/// Which mask the world model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Start from the complete graph (or a perturbed truth) and remask after
    /// every online discovery.
    #[default]
    Discover,
    /// Ground-truth mask for the whole run, no discovery.
    Truth,
    /// All-ones mask evaluated as the non-causal dense ablation.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub graph: GraphMode,
    pub alpha: f64,
    pub max_cond_size: usize,
    /// Global steps between discoveries.
    pub period: u64,
    /// Run discovery on a coreset instead of the whole buffer.
    pub coreset: bool,
    pub kappa: usize,
    /// When set, `kappa = ceil(kappa_fraction * |buffer|)` instead.
    pub kappa_fraction: Option<f64>,
    pub lambda: f64,
    pub gradient_source: GradientSource,
    pub null: NullMethod,
    pub permutations: usize,
    pub epsilon: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            graph: GraphMode::Discover,
            alpha: 0.05,
            max_cond_size: 3,
            period: 1000,
            coreset: true,
            kappa: 350,
            kappa_fraction: None,
            lambda: 1.0,
            gradient_source: GradientSource::Full,
            null: NullMethod::Gamma,
            permutations: 200,
            epsilon: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Trunk widths; an empty list gives one linear layer per head.
    pub hidden: Vec<usize>,
    /// Hidden-layer activation; identity for linear environments and tanh
    /// for nonlinear ones when absent.
    pub activation: Option<Activation>,
    pub lr: f64,
    pub optimizer: OptimizerMode,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 8],
            activation: None,
            lr: 1e-3,
            optimizer: OptimizerMode::Adam,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardVariant {
    #[default]
    Mse,
    Nll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorerConfig {
    pub eta: f64,
    /// Weight of the active reward; 0.5 for linear and 3 for nonlinear envs when unset.
    pub beta: Option<f64>,
    pub gamma: f64,
    pub horizon: u64,
    pub episodes: u64,
    pub holdout_size: usize,
    pub reward: RewardVariant,
    pub policy: PolicyConfig,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            beta: None,
            gamma: 0.99,
            horizon: 1000,
            episodes: 1,
            holdout_size: 200,
            reward: RewardVariant::Mse,
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub lr: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all steps over which epsilon is annealed.
    pub epsilon_fraction: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            replay_capacity: 100_000,
            batch_size: 64,
            target_sync: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; falls back to `$CAUSEX_OUTPUT_DIR`, then `runs/`.
    pub dir: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
    /// Write discovery wall times into the trace. Off by default because
    /// timings differ between otherwise identical runs.
    pub timings: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
            timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    /// Parse a file (or the defaults) and then apply `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(format!("reading config {}", p.display()), e))?;
                toml::from_str::<toml::Table>(&text).map_err(toml_error)?
            }
            None => toml::Table::new(),
        };
        let mut table = base;
        // Start from the full default tree so that every key is addressable.
        let defaults = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::config("<defaults>", e.to_string()))?;
        let mut merged = defaults;
        merge_tables(&mut merged, std::mem::take(&mut table));
        for (key, value) in overrides {
            set_path(&mut merged, key, value)?;
        }
        let cfg: ExperimentConfig = merged.try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn beta(&self) -> f64 {
        self.explorer.beta.unwrap_or(match self.env.transition {
            TransitionKind::Linear => 0.5,
            TransitionKind::Nonlinear => 3.0,
        })
    }

    pub fn arch(&self) -> Arch {
        if self.model.hidden.is_empty() {
            Arch::linear(self.env.n, self.env.c)
        } else {
            Arch::mlp(
                self.env.n,
                self.env.c,
                self.model.hidden.clone(),
                self.activation(),
            )
        }
    }

    pub fn activation(&self) -> Activation {
        self.model.activation.unwrap_or(match self.env.transition {
            TransitionKind::Linear => Activation::Identity,
            TransitionKind::Nonlinear => Activation::Tanh,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.explorer.horizon * self.explorer.episodes
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        check(e.n >= 1, "env.n", "must be at least 1")?;
        check(e.c >= 1, "env.c", "must be at least 1")?;
        check(
            e.edge_keep_prob > 0.0 && e.edge_keep_prob <= 1.0,
            "env.edge_keep_prob",
            format!("must lie in (0, 1], got {}", e.edge_keep_prob),
        )?;
        check(e.catalog_size >= 1, "env.catalog_size", "must be at least 1")?;
        check(
            (0.0..=1.0).contains(&e.flip_prob),
            "env.flip_prob",
            format!("must lie in [0, 1], got {}", e.flip_prob),
        )?;
        check(
            !(e.underestimation && self.discovery.graph != GraphMode::Discover),
            "env.underestimation",
            "requires discovery.graph = \"discover\"",
        )?;

        let d = &self.discovery;
        check(
            (0.0..=1.0).contains(&d.alpha),
            "discovery.alpha",
            format!("must lie in [0, 1], got {}", d.alpha),
        )?;
        check(d.period >= 1, "discovery.period", "must be at least 1")?;
        check(d.kappa >= 1, "discovery.kappa", "must be at least 1")?;
        if let Some(f) = d.kappa_fraction {
            check(
                f > 0.0 && f <= 1.0,
                "discovery.kappa_fraction",
                format!("must lie in (0, 1], got {f}"),
            )?;
        }
        check(
            d.lambda.is_finite(),
            "discovery.lambda",
            "must be finite",
        )?;
        check(d.epsilon > 0.0, "discovery.epsilon", format!("must be > 0, got {}", d.epsilon))?;
        check(d.permutations >= 1, "discovery.permutations", "must be at least 1")?;

        let m = &self.model;
        check(m.hidden.iter().all(|&w| w >= 1), "model.hidden", "widths must be at least 1")?;
        check(m.lr > 0.0, "model.lr", format!("must be > 0, got {}", m.lr))?;
        check(m.batch_size >= 1, "model.batch_size", "must be at least 1")?;

        let x = &self.explorer;
        check(x.eta > 0.0, "explorer.eta", format!("must be > 0, got {}", x.eta))?;
        if let Some(b) = x.beta {
            check(b.is_finite(), "explorer.beta", "must be finite")?;
        }
        check(
            (0.0..=1.0).contains(&x.gamma),
            "explorer.gamma",
            format!("must lie in [0, 1], got {}", x.gamma),
        )?;
        check(x.horizon >= 1, "explorer.horizon", "must be at least 1")?;
        check(x.episodes >= 1, "explorer.episodes", "must be at least 1")?;
        check(x.holdout_size >= 1, "explorer.holdout_size", "must be at least 1")?;

        let p = &x.policy;
        check(p.hidden >= 1, "explorer.policy.hidden", "must be at least 1")?;
        check(p.lr > 0.0, "explorer.policy.lr", format!("must be > 0, got {}", p.lr))?;
        check(p.batch_size >= 1, "explorer.policy.batch_size", "must be at least 1")?;
        check(
            p.replay_capacity >= p.batch_size,
            "explorer.policy.replay_capacity",
            "must hold at least one batch",
        )?;
        check(p.target_sync >= 1, "explorer.policy.target_sync", "must be at least 1")?;
        for (key, v) in [
            ("explorer.policy.epsilon_start", p.epsilon_start),
            ("explorer.policy.epsilon_end", p.epsilon_end),
            ("explorer.policy.epsilon_fraction", p.epsilon_fraction),
        ] {
            check((0.0..=1.0).contains(&v), key, format!("must lie in [0, 1], got {v}"))?;
        }
        Ok(())
    }
}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let key = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<toml>".to_string());
    Error::config(key, e.to_string().trim().to_string())
}

fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `a.b.c = value`; only keys known to the schema (or optional keys of a
/// known section) are accepted, which the final deserialisation enforces.
fn set_path(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = match table.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::config(key, "unknown config section")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}
