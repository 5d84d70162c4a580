//! Run configuration: a JSON object naming a built-in scenario plus numeric knobs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdde_mp::forward::ControlProcess;
use sdde_mp::scenarios::{builtin, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    #[default]
    General,
    Classical,
    Lq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeChoice {
    /// Deterministic sweep when the traced gradients allow it, regression otherwise.
    #[default]
    Auto,
    Deterministic,
    Regression,
}

fn default_steps() -> usize {
    200
}
fn default_paths() -> usize {
    1000
}
fn default_seed() -> u64 {
    42
}
fn default_eps() -> Vec<f64> {
    vec![0.04, 0.02, 0.01]
}
fn default_tol() -> f64 {
    1e-6
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    /// N
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// M
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    /// Spike locations; the scenario default when empty.
    #[serde(default)]
    pub taus: Vec<f64>,
    /// Fixed part of the maximum-condition tolerance.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub case: Case,
    #[serde(default)]
    pub mode: ModeChoice,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Scenario parameters overriding the built-in defaults.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Also write the Brownian increments as little-endian f64.
    #[serde(default)]
    pub dump_noise: bool,
    /// Draw the paths as antithetic pairs (paths must be even).
    #[serde(default)]
    pub antithetic: bool,
    /// Constant control replacing the scenario reference (every component set to this value).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key \"{}\": {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Pulls the field name out of serde's "unknown field `foo`" style messages.
fn offending_key(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "<document>".to_string()
}

impl ScenarioConfig {
    pub fn minimal(scenario: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "scenario": scenario })).expect("defaults parse")
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            ConfigError {
                key: offending_key(&msg),
                message: msg,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Scenario parameters with the top-level δ, λ, T folded in.
    pub fn merged_params(&self) -> BTreeMap<String, f64> {
        let mut p = self.params.clone();
        for (k, v) in [
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("horizon", self.horizon),
        ] {
            if let Some(v) = v {
                p.insert(k.to_string(), v);
            }
        }
        p
    }

    pub fn build(&self) -> Result<Scenario, ConfigError> {
        let mut sc = self.build_builtin()?;
        if let Some(c) = self.candidate {
            let u = vec![c; sc.spec.dims().m];
            if !sc.spec.controls.contains(&u) {
                return Err(err("candidate", format!("{c} is not in the control set")));
            }
            sc.reference = ControlProcess::constant(&sc.spec, &u).map_err(|e| err("candidate", e.to_string()))?;
        }
        Ok(sc)
    }

    fn build_builtin(&self) -> Result<Scenario, ConfigError> {
        builtin(&self.scenario, &self.merged_params(), self.steps).map_err(|e| {
            let key = match &e {
                sdde_mp::Error::Range { what, .. } => what.clone(),
                sdde_mp::Error::Alignment(_) => "steps".to_string(),
                sdde_mp::Error::Parameter(msg) => {
                    match msg.rsplit_once("parameter \"").and_then(|(_, r)| r.split_once('"')) {
                        Some((k, _)) => format!("params.{k}"),
                        None => "scenario".to_string(),
                    }
                }
                _ => "scenario".to_string(),
            };
            err(&key, e.to_string())
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(err("steps", "must be at least 1"));
        }
        if self.paths == 0 {
            return Err(err("paths", "must be at least 1"));
        }
        if self.antithetic && self.paths % 2 == 1 {
            return Err(err("paths", "antithetic sampling needs an even path count"));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(err("tol", format!("{} is not a non-negative number", self.tol)));
        }
        let sc = self.build()?;
        let delta = sc.spec.delay.delta;
        if self.eps.is_empty() {
            return Err(err("eps", "schedule is empty"));
        }
        for &e in &self.eps {
            if !(e > 0.0 && e < delta) {
                return Err(err("eps", format!("ε = {e} must lie in (0, δ = {delta})")));
            }
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(err("eps", "schedule must be strictly decreasing"));
        }
        let grid = sc.spec.grid().map_err(|e| err("steps", e.to_string()))?;
        for &t in &self.taus {
            grid.node(t).map_err(|e| err("taus", e.to_string()))?;
            if !(0.0..sc.spec.delay.horizon).contains(&t) {
                return Err(err("taus", format!("τ = {t} outside [0, T)")));
            }
        }
        for &e in &self.eps {
            grid.steps_in(e).map_err(|x| err("eps", x.to_string()))?;
        }
        Ok(())
    }

    pub fn taus_or(&self, fallback: f64) -> Vec<f64> {
        if self.taus.is_empty() {
            vec![fallback]
        } else {
            self.taus.clone()
        }
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("<file>", format!("{}: {e}", path.display())))?;
    ScenarioConfig::parse(&text)
}
