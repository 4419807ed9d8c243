//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use ope_lab::{
    build_tabular_features, leaky_four_state, random_tabular_instance, two_state_instance, FeatureMap,
    InitialDistribution, Instance, Policy, TabularMdp,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub instance: InstanceSource,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    /// Episodes per dataset for `evaluate` and `confidence`.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Episode length; defaults to the horizon, or 1 in the discounted setting.
    #[serde(default)]
    pub episode_length: Option<usize>,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub seeds: SeedSettings,
    #[serde(default)]
    pub hard_instance: HardInstanceSettings,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Either a builtin such as `"two-state z=0.75"` or model files.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum InstanceSource {
    Builtin {
        builtin: String,
    },
    Files {
        model: PathBuf,
        behavior: PathBuf,
        behavior_init: PathBuf,
        target: PathBuf,
        target_init: PathBuf,
        /// Tabular features when absent.
        #[serde(default)]
        features: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSettings {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Switches to the discounted estimator when set.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Overrides the feature-class radius computed from the features.
    #[serde(default)]
    pub omega: Option<f64>,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            lambda: default_lambda(),
            horizon: default_horizon(),
            gamma: None,
            delta: default_delta(),
            omega: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    /// Sample sizes `N`, counted in transitions.
    pub grid: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSettings {
    #[serde(default = "default_seed_count")]
    pub count: u64,
    #[serde(default)]
    pub base: u64,
}

impl Default for SeedSettings {
    fn default() -> Self {
        SeedSettings {
            count: default_seed_count(),
            base: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum Direction {
    /// `"optimal"` or `"zero"`.
    Named(String),
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct HardInstanceSettings {
    /// Transitions per dataset.
    #[serde(default = "default_hard_n")]
    pub n: usize,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl Default for HardInstanceSettings {
    fn default() -> Self {
        HardInstanceSettings {
            n: default_hard_n(),
            direction: default_direction(),
            epsilon: None,
        }
    }
}

fn default_episodes() -> usize {
    100
}
fn default_lambda() -> f64 {
    1.0
}
fn default_horizon() -> usize {
    4
}
fn default_delta() -> f64 {
    0.1
}
fn default_seed_count() -> u64 {
    1
}
fn default_hard_n() -> usize {
    1000
}
fn default_direction() -> Direction {
    Direction::Named("optimal".into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("malformed JSON: {e}")))?;
        match raw.get("schema").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(CliError::Config(format!("unsupported schema version {v}"))),
            None => return Err(CliError::Config("missing integer \"schema\" key".into())),
        }
        let config: ExperimentConfig =
            serde_json::from_value(raw).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        // Relative model paths resolve against the config file.
        if let InstanceSource::Files {
            model,
            behavior,
            behavior_init,
            target,
            target_init,
            features,
        } = &mut config.instance
        {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [model, behavior, behavior_init, target, target_init] {
                *p = base.join(&*p);
            }
            if let Some(f) = features {
                *f = base.join(&*f);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.estimator;
        if !(e.lambda >= 0.0) || !e.lambda.is_finite() {
            return Err(CliError::Config(format!("lambda {} must be >= 0", e.lambda)));
        }
        if !(e.delta > 0.0 && e.delta < 1.0) {
            return Err(CliError::Config(format!("delta {} must lie in (0, 1)", e.delta)));
        }
        if let Some(g) = e.gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(CliError::Config(format!("gamma {g} must lie in [0, 1)")));
            }
        }
        if let Some(w) = e.omega {
            if !(w > 0.0) || !w.is_finite() {
                return Err(CliError::Config(format!("omega {w} must be positive and finite")));
            }
        }
        if self.episode_length == Some(0) {
            return Err(CliError::Config("episode_length must be positive".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.grid.is_empty() {
                return Err(CliError::Config("sweep grid must be nonempty".into()));
            }
            let len = self.episode_len();
            if let Some(n) = sweep.grid.iter().find(|&&n| n == 0 || n % len != 0) {
                return Err(CliError::Config(format!(
                    "sweep size {n} is not a positive multiple of the episode length {len}"
                )));
            }
        }
        if self.seeds.count == 0 {
            return Err(CliError::Config("seed count must be positive".into()));
        }
        if let Direction::Named(name) = &self.hard_instance.direction {
            if name != "optimal" && name != "zero" {
                return Err(CliError::Config(format!(
                    "direction must be \"optimal\", \"zero\" or a vector, found {name:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn episode_len(&self) -> usize {
        self.episode_length.unwrap_or(match self.estimator.gamma {
            Some(_) => 1,
            None => self.estimator.horizon.max(1),
        })
    }

    pub fn build_instance(&self) -> Result<Instance> {
        match &self.instance {
            InstanceSource::Builtin { builtin } => parse_builtin(builtin, self.estimator.horizon),
            InstanceSource::Files {
                model,
                behavior,
                behavior_init,
                target,
                target_init,
                features,
            } => {
                let model = TabularMdp::load(model)?;
                let features = match features {
                    Some(p) => FeatureMap::load(p, model.n_states, model.n_actions)?,
                    None => build_tabular_features(model.n_states, model.n_actions),
                };
                let inst = Instance {
                    behavior: Policy::load(behavior)?,
                    behavior_init: InitialDistribution::load(behavior_init)?,
                    target: Policy::load(target)?,
                    target_init: InitialDistribution::load(target_init)?,
                    model,
                    features,
                };
                inst.behavior.check(inst.model.n_states, inst.model.n_actions)?;
                inst.target.check(inst.model.n_states, inst.model.n_actions)?;
                inst.behavior_init.check(inst.model.n_states)?;
                inst.target_init.check(inst.model.n_states)?;
                Ok(inst)
            }
        }
    }
}

/// Parse `"<name> key=value ..."`.
pub fn parse_builtin(spec: &str, horizon: usize) -> Result<Instance> {
    let mut parts = spec.split_whitespace();
    let name = parts.next().ok_or_else(|| CliError::Config("empty builtin name".into()))?;
    let mut params = Vec::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("builtin parameter {part:?} is not key=value")))?;
        params.push((k, v));
    }
    let get = |key: &str| params.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let known = |keys: &[&str]| -> Result<()> {
        for (k, _) in &params {
            if !keys.contains(k) {
                return Err(CliError::Config(format!("unknown parameter {k:?} for builtin {name:?}")));
            }
        }
        Ok(())
    };
    fn num<T: std::str::FromStr>(key: &str, raw: Option<&str>, default: Option<T>) -> Result<T> {
        match raw {
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Config(format!("cannot parse {key}={v}"))),
            None => default.ok_or_else(|| CliError::Config(format!("builtin needs {key}="))),
        }
    }
    match name {
        "two-state" => {
            known(&["z"])?;
            let z: f64 = num("z", get("z"), None)?;
            Ok(two_state_instance(z, horizon)?.instance)
        }
        "leaky-four-state" => {
            known(&["leak"])?;
            let leak: f64 = num("leak", get("leak"), Some(0.05))?;
            Ok(leaky_four_state(horizon, leak)?.instance)
        }
        "random-tabular" => {
            known(&["states", "actions", "seed"])?;
            let states: usize = num("states", get("states"), None)?;
            let actions: usize = num("actions", get("actions"), None)?;
            let seed: u64 = num("seed", get("seed"), Some(0))?;
            if states == 0 || actions == 0 {
                return Err(CliError::Config("states and actions must be positive".into()));
            }
            Ok(random_tabular_instance(states, actions, seed))
        }
        other => Err(CliError::Config(format!(
            "unknown builtin {other:?}; expected two-state, leaky-four-state or random-tabular"
        ))),
    }
}
