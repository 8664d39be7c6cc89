//! Run configuration.
//!
//! Files are sectioned `key = value` text (TOML syntax). Loading merges
//! built-in defaults, then the file, then dotted `section.key=value`
//! overrides. Keys that do not exist in the schema are rejected with the
//! nearest valid key as a hint.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

/// Representation objective / ablation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeMode {
    /// Causal transformer predicting the next embedding.
    Full,
    /// Per-timestep MLP in place of the transformer.
    NoTransformer,
    /// Aligns with the same-step embedding instead of the next one.
    NoShift,
    /// Single linear map in place of the projector MLP.
    NoProjector,
    /// Pixel-decoder baseline; no next-embedding loss.
    Reconstruction,
}

impl NeMode {
    pub const ALL: [NeMode; 5] = [NeMode::Full, NeMode::NoTransformer, NeMode::NoShift, NeMode::NoProjector, NeMode::Reconstruction];

    pub fn as_str(self) -> &'static str {
        match self {
            NeMode::Full => "full",
            NeMode::NoTransformer => "no_transformer",
            NeMode::NoShift => "no_shift",
            NeMode::NoProjector => "no_projector",
            NeMode::Reconstruction => "reconstruction",
        }
    }
}

impl fmt::Display for NeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NeMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::InvalidMode(s.to_string()))
    }
}

/// How latent samples are produced during world-model training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSampling {
    /// One-hot sample with straight-through gradients.
    StraightThrough,
    /// Deterministic relaxed latents (the mixed probabilities); used by gradient checks.
    Probs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// `tmaze`, `keydoor`, or `linear_gaussian`.
    pub name: String,
    pub corridor_len: usize,
    pub cue_steps: usize,
    pub grid: usize,
    pub max_episode_steps: usize,
    pub image_size: usize,
    /// Wrap the environment with a pixel-noise distractor patch.
    pub distractor: bool,
    pub noise_patch: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: "tmaze".into(),
            corridor_len: 10,
            cue_steps: 2,
            grid: 7,
            max_episode_steps: 100,
            image_size: 16,
            distractor: false,
            noise_patch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub batch_size: usize,
    pub batch_length: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: 5_000_000, batch_size: 16, batch_length: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub deter: usize,
    pub latents: usize,
    pub classes: usize,
    pub units: usize,
    pub encoder_channels: Vec<usize>,
    pub unimix: f64,
    pub latent_sampling: LatentSampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            deter: 512,
            latents: 32,
            classes: 32,
            units: 256,
            encoder_channels: vec![16, 32, 64, 128],
            unimix: 0.01,
            latent_sampling: LatentSampling::StraightThrough,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub pred_scale: f64,
    pub dyn_scale: f64,
    pub rep_scale: f64,
    pub free_nats: f64,
    pub recon_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { pred_scale: 1.0, dyn_scale: 1.0, rep_scale: 0.1, free_nats: 1.0, recon_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeConfig {
    pub mode: NeMode,
    pub scale: f64,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub bt_lambda: f64,
}

impl Default for NeConfig {
    fn default() -> Self {
        Self { mode: NeMode::Full, scale: 1.0, token_dim: 256, layers: 2, heads: 4, bt_lambda: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_scale: f64,
    pub critic_ema_decay: f64,
    pub slow_critic_scale: f64,
    pub return_decay: f64,
    pub return_low: f64,
    pub return_high: f64,
    pub bins: usize,
    pub bin_limit: f64,
    pub units: usize,
    pub layers: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.85,
            lambda: 0.95,
            entropy_scale: 3e-4,
            critic_ema_decay: 0.98,
            slow_critic_scale: 1.0,
            return_decay: 0.99,
            return_low: 5.0,
            return_high: 95.0,
            bins: 255,
            bin_limit: 20.0,
            units: 256,
            layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub agc: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 4e-5, beta1: 0.9, beta2: 0.999, eps: 1e-20, agc: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_env_steps: u64,
    /// Replayed steps trained per environment step collected.
    pub train_ratio: f64,
    pub env_instances: usize,
    pub log_every: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_env_steps: 200_000,
            train_ratio: 32.0,
            env_instances: 4,
            log_every: 1_000,
            eval_every: 10_000,
            eval_episodes: 20,
            checkpoint_every: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub env: EnvConfig,
    pub replay: ReplayConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub ne: NeConfig,
    pub behavior: BehaviorConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            replay: ReplayConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            ne: NeConfig::default(),
            behavior: BehaviorConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    /// Defaults, then `text`, then `overrides` (each `section.key=value`).
    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let defaults = default_table();
        let known = flatten(&defaults);
        let mut merged = defaults;
        for (key, value) in flatten(&file) {
            check_known(&key, &known)?;
            set_dotted(&mut merged, &key, value);
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
            let key = key.trim();
            check_known(key, &known)?;
            set_dotted(&mut merged, key, parse_scalar(raw.trim()));
        }
        let cfg: Config = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_str_with_overrides(&text, overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_str_with_overrides(&self.to_toml(), overrides)
    }

    /// Canonical text form; re-parses to an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.replay.batch_size == 0 || self.replay.batch_length == 0 || self.replay.capacity == 0 {
            return bad("replay sizes must be positive");
        }
        if self.model.latents == 0 || self.model.classes < 2 || self.model.deter == 0 || self.model.embed_dim == 0 {
            return bad("model sizes must be positive (classes >= 2)");
        }
        if !(0.0..1.0).contains(&self.model.unimix) {
            return bad("model.unimix must lie in [0, 1)");
        }
        if self.ne.heads == 0 || !self.ne.token_dim.is_multiple_of(self.ne.heads) {
            return bad("ne.token_dim must be divisible by ne.heads");
        }
        if self.behavior.bins < 2 || self.behavior.bin_limit <= 0.0 {
            return bad("behavior.bins >= 2 and behavior.bin_limit > 0 required");
        }
        if !(0.0..=1.0).contains(&self.behavior.gamma) || !(0.0..=1.0).contains(&self.behavior.lambda) {
            return bad("behavior.gamma and behavior.lambda must lie in [0, 1]");
        }
        if self.train.env_instances == 0 || self.train.train_ratio < 0.0 {
            return bad("train.env_instances must be positive and train.train_ratio non-negative");
        }
        if self.train.eval_episodes == 0 {
            return bad("train.eval_episodes must be positive");
        }
        if self.optim.lr <= 0.0 {
            return bad("optim.lr must be positive");
        }
        Ok(())
    }
}

fn default_table() -> toml::Table {
    match toml::Value::try_from(Config::default()).expect("defaults serialise") {
        toml::Value::Table(t) => t,
        _ => unreachable!(),
    }
}

/// Leaf values keyed by dotted path.
fn flatten(table: &toml::Table) -> BTreeMap<String, toml::Value> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn check_known(key: &str, known: &BTreeMap<String, toml::Value>) -> Result<()> {
    if known.contains_key(key) {
        return Ok(());
    }
    let suggestion = known
        .keys()
        .map(|k| (strsim::levenshtein(k, key), k))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k.clone());
    Err(Error::UnknownKey { key: key.to_string(), suggestion })
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("section is a table");
    }
    cur.insert(last.to_string(), value);
}

/// Typed scalar from override text; bare words become strings.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
