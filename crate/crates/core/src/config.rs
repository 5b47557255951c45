use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Weights of the three expert control terms and the leader feedback gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertWeights {
    pub c_alpha: f64,
    pub c_beta: f64,
    pub c_gamma: f64,
    /// Position gain of the leader term; the velocity gain is `sqrt(c1)`.
    pub c1: f64,
}

impl Default for ExpertWeights {
    fn default() -> Self {
        Self {
            c_alpha: 1.0,
            c_beta: 1.5,
            c_gamma: 4.0,
            c1: 4.0,
        }
    }
}

impl ExpertWeights {
    pub fn c2(&self) -> f64 {
        self.c1.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: impl Into<Vec<f64>>, radius: f64) -> Self {
        Self {
            center: center.into(),
            radius,
        }
    }
}

/// Physical, geometric and episode constants of one swarm scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwarmConfig {
    pub n_robots: usize,
    pub dim: usize,
    pub comm_range: f64,
    pub sample_period: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub safety_dist: f64,
    pub episode_steps: usize,
    pub leader_speed: f64,
    pub init_box_scale: f64,
    /// Explicit leader start; `None` places it at the centre of the +x face
    /// of the initial box.
    pub leader_start: Option<Vec<f64>>,
    pub rng_seed: u64,
    pub weights: ExpertWeights,
    pub obstacles: Vec<Obstacle>,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            n_robots: 20,
            dim: 2,
            comm_range: 1.0,
            sample_period: 0.01,
            u_max: 10.0,
            v_max: 10.0,
            safety_dist: 0.15,
            episode_steps: 1200,
            leader_speed: 1.0,
            init_box_scale: 0.5,
            leader_start: None,
            rng_seed: 0,
            weights: ExpertWeights::default(),
            obstacles: default_obstacles(2, 0.0),
        }
    }
}

/// Three circles of radius 0.5 straddling the leader path. For `dim > 2`
/// the extra coordinates are set to `lift`.
pub fn default_obstacles(dim: usize, lift: f64) -> Vec<Obstacle> {
    [(4.0, 0.8), (5.2, -0.8), (6.4, 0.3)]
        .into_iter()
        .map(|(x, y)| {
            let mut c = vec![x, y];
            c.resize(dim.max(2), lift);
            Obstacle::new(c, 0.5)
        })
        .collect()
}

impl SwarmConfig {
    /// Reduced scenario used for quick training runs: 12 robots, the first
    /// two default obstacles and 600 steps.
    pub fn desk() -> Self {
        let mut c = Self {
            n_robots: 12,
            episode_steps: 600,
            ..Self::default()
        };
        c.obstacles.truncate(2);
        c
    }

    /// Side length of the initial placement box.
    pub fn init_box_side(&self) -> f64 {
        self.init_box_scale * self.comm_range * (self.n_robots as f64).sqrt()
    }

    pub fn leader_start(&self) -> Vec<f64> {
        match &self.leader_start {
            Some(p) => p.clone(),
            None => {
                let side = self.init_box_side();
                let mut p = vec![side / 2.0; self.dim];
                p[0] = side;
                p
            }
        }
    }

    /// Width of one robot's observation row.
    pub fn obs_width(&self) -> usize {
        9 * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_robots < 1 {
            return fail("n_robots must be at least 1".into());
        }
        if !(self.dim == 2 || self.dim == 3) {
            return fail(format!("dim must be 2 or 3, got {}", self.dim));
        }
        for (name, v) in [
            ("comm_range", self.comm_range),
            ("sample_period", self.sample_period),
            ("u_max", self.u_max),
            ("v_max", self.v_max),
            ("weights.c1", self.weights.c1),
            ("init_box_scale", self.init_box_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.safety_dist >= 0.0 && self.safety_dist < self.comm_range) {
            return fail(format!(
                "safety_dist must lie in [0, comm_range), got {}",
                self.safety_dist
            ));
        }
        if self.episode_steps < 1 {
            return fail("episode_steps must be at least 1".into());
        }
        for (name, v) in [
            ("leader_speed", self.leader_speed),
            ("weights.c_alpha", self.weights.c_alpha),
            ("weights.c_beta", self.weights.c_beta),
            ("weights.c_gamma", self.weights.c_gamma),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if let Some(p) = &self.leader_start {
            if p.len() != self.dim || p.iter().any(|x| !x.is_finite()) {
                return fail(format!("leader_start must hold {} finite values", self.dim));
            }
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            if o.center.len() != self.dim {
                return fail(format!(
                    "obstacle {k} has {} coordinates, expected {}",
                    o.center.len(),
                    self.dim
                ));
            }
            if !(o.radius.is_finite() && o.radius > 0.0) || o.center.iter().any(|x| !x.is_finite())
            {
                return fail(format!(
                    "obstacle {k} needs a positive radius and finite center"
                ));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table, 3)
    }

    /// Reads a TOML file and applies `key=value` overrides on top of it.
    /// The names `default` and `desk` select the built-in scenarios.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut default_obstacle_count = 3;
        let mut table = match path {
            Some(p) if p.as_os_str() == "desk" => {
                let mut t: toml::Table = Self::desk()
                    .to_toml_string()
                    .parse()
                    .expect("desk preset parses");
                t.remove("obstacles");
                default_obstacle_count = 2;
                t
            }
            Some(p) if p.as_os_str() != "default" => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            _ => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table, default_obstacle_count)
    }

    fn from_table(table: toml::Table, default_obstacle_count: usize) -> Result<Self> {
        let explicit_obstacles = table.contains_key("obstacles");
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !explicit_obstacles {
            let lift = cfg.leader_start().get(2).copied().unwrap_or(0.0);
            cfg.obstacles = default_obstacles(cfg.dim, lift);
            cfg.obstacles.truncate(default_obstacle_count);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets a dotted key such as `weights.c_beta=2` in a TOML table. Values are
/// parsed as TOML and fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!(
            "override `{assignment}` has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut node = table;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
