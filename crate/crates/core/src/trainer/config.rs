//! Training configuration. Defaults reproduce the published hyperparameters;
//! [`TrainConfig::desk`] shrinks everything to single-core scale.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nnet::Activation;
use crate::planner::PlanConfig;
use crate::policy::Lambda;
use crate::prior::PriorMode;
use crate::worldmodel::WorldModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            max_grad_norm: 20.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub batch_size: usize,
    pub reanalyze_batch: usize,
    pub reanalyze_interval: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 1_000_000,
            batch_size: 256,
            reanalyze_batch: 20,
            reanalyze_interval: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_dim: usize,
    pub num_enc_layers: usize,
    pub mlp_dim: usize,
    pub latent_dim: usize,
    pub simnorm_dim: usize,
    pub dropout: f64,
    pub num_q: usize,
    pub num_bins: usize,
    pub symlog_min: f64,
    pub symlog_max: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_dim: 256,
            num_enc_layers: 2,
            mlp_dim: 512,
            latent_dim: 512,
            simnorm_dim: 8,
            dropout: 0.01,
            num_q: 5,
            num_bins: 101,
            symlog_min: -10.0,
            symlog_max: 10.0,
            activation: Activation::Mish,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub rho: f64,
    pub consistency_coef: f64,
    pub reward_coef: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub tau: f64,
    /// Weight of the KL-regularized critic loss.
    pub klq_coef: f64,
    /// EMA rate of the percentile scale trackers.
    pub scale_rate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rho: 0.5,
            consistency_coef: 20.0,
            reward_coef: 0.1,
            value_coef: 0.1,
            entropy_coef: 1e-4,
            tau: 0.01,
            klq_coef: 0.1,
            scale_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub mode: PriorMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub name: EnvKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub seeding_steps: u64,
    /// Environment steps per gradient update.
    pub update_every: u64,
    /// KL weight; `inf` selects pure distillation.
    pub lambda: f64,
    /// Empty disables the file.
    pub metrics_path: String,
    /// Empty disables the file.
    pub checkpoint_path: String,
    pub optim: OptimConfig,
    pub replay: ReplayConfig,
    pub model: ModelConfig,
    pub planner: PlanConfig,
    pub loss: LossConfig,
    pub policy: PolicyConfig,
    pub prior: PriorConfig,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            total_steps: 1_000_000,
            seeding_steps: 1000,
            update_every: 1,
            lambda: 1.0,
            metrics_path: String::new(),
            checkpoint_path: String::new(),
            optim: OptimConfig::default(),
            replay: ReplayConfig::default(),
            model: ModelConfig::default(),
            planner: PlanConfig::default(),
            loss: LossConfig::default(),
            policy: PolicyConfig::default(),
            prior: PriorConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small widths and populations for single-core runs on the toy tasks.
    pub fn desk() -> Self {
        let mut c = TrainConfig {
            total_steps: 30_000,
            ..TrainConfig::default()
        };
        c.replay.capacity = 100_000;
        c.replay.batch_size = 32;
        c.model.enc_dim = 64;
        c.model.mlp_dim = 64;
        c.model.latent_dim = 32;
        c.model.dropout = 0.0;
        c.model.num_q = 2;
        c.planner.iterations = 4;
        c.planner.population = 96;
        c.planner.policy_samples = 8;
        c.planner.elites = 12;
        c.prior.mode = PriorMode::ForwardKl;
        c
    }

    pub fn lambda(&self) -> Result<Lambda> {
        Lambda::from_f64(self.lambda)
    }

    pub fn world_model(&self) -> WorldModelConfig {
        let spec = self.env.name.spec();
        WorldModelConfig {
            obs_dim: spec.obs_dim,
            action_dim: spec.action_dim,
            latent_dim: self.model.latent_dim,
            simnorm_dim: self.model.simnorm_dim,
            enc_dim: self.model.enc_dim,
            num_enc_layers: self.model.num_enc_layers,
            mlp_dim: self.model.mlp_dim,
            num_bins: self.model.num_bins,
            symlog_min: self.model.symlog_min,
            symlog_max: self.model.symlog_max,
            activation: self.model.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        self.lambda()?;
        self.planner.validate()?;
        if self.update_every == 0 {
            return bad("update_every", "must be >= 1");
        }
        if self.replay.batch_size == 0 {
            return bad("replay.batch_size", "must be >= 1");
        }
        if self.replay.capacity < self.planner.horizon {
            return bad("replay.capacity", "must hold at least one horizon");
        }
        if self.model.num_q < 2 {
            return bad("model.num_q", "must be >= 2");
        }
        if self.model.simnorm_dim == 0 || !self.model.latent_dim.is_multiple_of(self.model.simnorm_dim) {
            return bad("model.simnorm_dim", "must divide model.latent_dim");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout", "must be in [0, 1)");
        }
        if self.model.num_bins < 2 || self.model.symlog_min >= self.model.symlog_max {
            return bad("model.num_bins", "need >= 2 bins over a non-empty range");
        }
        if !(self.loss.tau > 0.0 && self.loss.tau <= 1.0) {
            return bad("loss.tau", "must be in (0, 1]");
        }
        if !(self.loss.scale_rate > 0.0 && self.loss.scale_rate <= 1.0) {
            return bad("loss.scale_rate", "must be in (0, 1]");
        }
        if self.policy.log_std_min >= self.policy.log_std_max {
            return bad("policy.log_std_min", "must be below policy.log_std_max");
        }
        if self.planner.min_std < self.policy.log_std_min.exp() {
            return bad("planner.min_std", "must not be below the policy std floor");
        }
        if !(self.optim.lr > 0.0) {
            return bad("optim.lr", "must be > 0");
        }
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: first_key(&e).unwrap_or_default(),
            msg: e.message().to_owned(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        check_known_keys(&table)?;
        let cfg: TrainConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config {
            key: first_key(&e).unwrap_or_default(),
            msg: e.message().to_owned(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a missing path means the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

fn first_key(e: &toml::de::Error) -> Option<String> {
    let msg = e.message();
    let start = msg.find('`')?;
    let rest = &msg[start + 1..];
    Some(rest[..rest.find('`')?].to_owned())
}

/// Inserts `a.b.c=value` into `table`. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.into(),
        msg: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            msg: format!("`{p}` is not a section"),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

fn check_known_keys(table: &Table) -> Result<()> {
    let reference: Table = TrainConfig::default().to_toml().parse().expect("default config parses");
    fn walk(t: &Table, r: &Table, prefix: &str) -> Result<()> {
        for (k, v) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match (v, r.get(k)) {
                (_, None) => {
                    return Err(Error::Config {
                        key: path,
                        msg: "unknown key".into(),
                    })
                }
                (Value::Table(sub), Some(Value::Table(rsub))) => walk(sub, rsub, &path)?,
                (Value::Table(_), Some(_)) => {
                    return Err(Error::Config {
                        key: path,
                        msg: "expected a value, found a section".into(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
    walk(table, &reference, "")
}
