//! Plain-text `key = value` configuration files.
//!
//! Keys mirror the environment parameter symbols (`n_agents`, `comm_range`,
//! `destination`, ...); anything not present keeps its documented default.
//! Unknown keys are an error so typos fail before any training starts.

use crate::comm::TriggerConfig;
use crate::env::{regular_polygon, EnvConfig};
use crate::error::Error;
use crate::losses::LossConfig;
use crate::net::NetConfig;
use crate::trainer::TrainConfig;
use crate::Result;
use std::collections::BTreeMap;

/// Parsed key-value pairs with consumption tracking.
#[derive(Debug, Clone)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    consumed: BTreeMap<String, bool>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Parse(format!(
                    "line {}: empty key or value",
                    lineno + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Parse(format!("duplicate key `{key}`")));
            }
        }
        let consumed = entries.keys().map(|k| (k.clone(), false)).collect();
        Ok(ConfigMap { entries, consumed })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        if let Some(v) = self.entries.get(key) {
            self.consumed.insert(key.to_string(), true);
            Some(v.clone())
        } else {
            None
        }
    }

    pub fn get_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Parse(format!("key `{key}`: `{v}` is not a number"))),
        }
    }

    pub fn get_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| Error::Parse(format!("key `{key}`: `{v}` is not a count"))),
        }
    }

    pub fn get_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| Error::Parse(format!("key `{key}`: `{v}` is not an integer"))),
        }
    }

    pub fn get_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" | "on" => Ok(Some(true)),
                "false" | "0" | "no" | "off" => Ok(Some(false)),
                _ => Err(Error::Parse(format!("key `{key}`: `{v}` is not a bool"))),
            },
        }
    }

    /// Comma-separated pair, e.g. `destination = 0, 10`.
    pub fn get_pair(&mut self, key: &str) -> Result<Option<[f64; 2]>> {
        match self.get_list(key)? {
            None => Ok(None),
            Some(values) if values.len() == 2 => Ok(Some([values[0], values[1]])),
            Some(values) => Err(Error::Parse(format!(
                "key `{key}`: expected 2 values, got {}",
                values.len()
            ))),
        }
    }

    /// Comma-separated list of numbers.
    pub fn get_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let p = part.trim();
                    out.push(p.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("key `{key}`: `{p}` is not a number"))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }

    pub fn get_string(&mut self, key: &str) -> Option<String> {
        self.take(key)
    }

    /// Error if any key was never consumed (catches typos).
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .consumed
            .iter()
            .filter(|(_, &used)| !used)
            .map(|(k, _)| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

/// Override environment defaults from parsed keys. Changing `n_agents`
/// regenerates the regular-polygon formation template.
pub fn apply_env(cfg: &mut EnvConfig, map: &mut ConfigMap) -> Result<()> {
    if let Some(n) = map.get_usize("n_agents")? {
        cfg.n_agents = n;
        cfg.formation_offsets = regular_polygon(n, 1.0);
    }
    if let Some(v) = map.get_f64("comm_range")? {
        cfg.comm_range = v;
    }
    if let Some(v) = map.get_pair("destination")? {
        cfg.destination = v;
    }
    if let Some(v) = map.get_pair("init_pos_range")? {
        cfg.init_pos_range = v;
    }
    if let Some(v) = map.get_pair("accel_range")? {
        cfg.accel_range = v;
    }
    if let Some(v) = map.get_f64("dt")? {
        cfg.dt = v;
    }
    if let Some(v) = map.get_usize("episode_len")? {
        cfg.episode_len = v;
    }
    if let Some(v) = map.get_f64("omega_k")? {
        cfg.reward_weights[0] = v;
    }
    if let Some(v) = map.get_f64("omega_m")? {
        cfg.reward_weights[1] = v;
    }
    if let Some(v) = map.get_f64("collision_radius")? {
        cfg.collision_radius = v;
    }
    if let Some(v) = map.get_f64("velocity_cap")? {
        cfg.velocity_cap = v;
    }
    if let Some(v) = map.get_f64("formation_radius")? {
        cfg.formation_offsets = regular_polygon(cfg.n_agents, v);
    }
    Ok(())
}

pub fn apply_net(cfg: &mut NetConfig, n_agents: usize, map: &mut ConfigMap) -> Result<()> {
    cfg.n_agents = n_agents;
    if let Some(v) = map.get_usize("d_m")? {
        cfg.d_m = v;
    }
    if let Some(v) = map.get_usize("d_pe")? {
        cfg.d_pe = v;
    }
    if let Some(v) = map.get_usize("n_heads")? {
        cfg.n_heads = v;
    }
    if let Some(v) = map.get_usize("d_hidden")? {
        cfg.d_hidden = v;
    }
    if let Some(v) = map.get_f64("sigma_start")? {
        cfg.sigma_start = v;
    }
    if let Some(v) = map.get_f64("sigma_decay")? {
        cfg.sigma_decay = v;
    }
    if let Some(v) = map.get_f64("sigma_min")? {
        cfg.sigma_min = v;
    }
    Ok(())
}

pub fn apply_trigger(cfg: &mut TriggerConfig, map: &mut ConfigMap) -> Result<()> {
    if let Some(v) = map.get_f64("c")? {
        cfg.c = v;
    }
    if let Some(v) = map.get_f64("zeta")? {
        cfg.zeta = v;
    }
    if let Some(v) = map.get_bool("force_first_step")? {
        cfg.force_first_step = v;
    }
    if let Some(v) = map.get_bool("invert_rule")? {
        cfg.invert_rule = v;
    }
    Ok(())
}

pub fn apply_loss(cfg: &mut LossConfig, map: &mut ConfigMap) -> Result<()> {
    if let Some(v) = map.get_f64("eta")? {
        cfg.eta = v;
    }
    if let Some(v) = map.get_f64("varrho")? {
        cfg.varrho = v;
    }
    if let Some(v) = map.get_f64("rho")? {
        cfg.rho = v;
    }
    if let Some(v) = map.get_f64("alpha")? {
        cfg.alpha = v;
    }
    if let Some(v) = map.get_f64("sigma_floor")? {
        cfg.sigma_floor = v;
    }
    Ok(())
}

pub fn apply_train(cfg: &mut TrainConfig, map: &mut ConfigMap) -> Result<()> {
    if let Some(v) = map.get_f64("gamma")? {
        cfg.gamma = v;
    }
    if let Some(v) = map.get_f64("lam")? {
        cfg.lam = v;
    }
    if let Some(v) = map.get_f64("clip_eps")? {
        cfg.clip_eps = v;
    }
    if let Some(v) = map.get_f64("lr")? {
        cfg.lr = v;
    }
    if let Some(v) = map.get_usize("ppo_epochs")? {
        cfg.ppo_epochs = v;
    }
    if let Some(v) = map.get_usize("epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = map.get_usize("minibatch")? {
        cfg.minibatch = v;
    }
    if let Some(v) = map.get_u64("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = map.get_bool("adv_norm")? {
        cfg.adv_norm = v;
    }
    if let Some(v) = map.get_usize("episodes_per_epoch")? {
        cfg.episodes_per_epoch = v;
    }
    if let Some(v) = map.get_usize("checkpoint_every")? {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = map.get_f64("max_grad_norm")? {
        cfg.max_grad_norm = v;
    }
    if let Some(v) = map.get_f64("target_kl")? {
        cfg.target_kl = v;
    }
    Ok(())
}
