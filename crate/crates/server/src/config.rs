//! Service configuration, read from JSON and checked before anything starts.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;

use meshwatch_core::allocator::DEFAULT_HOLDDOWN_SECS;
use meshwatch_core::monitor::ProcessorCatalog;
use meshwatch_core::IpPrefix;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid service config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub interval_s: u64,
    pub processors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub id: String,
    pub prefix: IpPrefix,
    #[serde(default = "default_holddown")]
    pub holddown_s: i64,
}

fn default_holddown() -> i64 {
    DEFAULT_HOLDDOWN_SECS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuilderConfig {
    pub id: String,
    pub architectures: Vec<String>,
}

/// How the simulated agents behave.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimNodeProfile {
    pub count: usize,
    /// Telemetry modules each agent reports.
    pub modules: Vec<String>,
    /// Interface byte counters wrap at `2^wrap_width_bits`.
    pub wrap_width_bits: u32,
    /// Chance that a node reboots between two reports.
    pub reboot_probability: f64,
    /// Share of nodes that push; the rest are pulled.
    pub push_fraction: f64,
    pub report_interval_s: u64,
    /// Chance that a node is down during any given minute.
    pub down_probability: f64,
    /// Device model the fleet's nodes are configured with.
    pub device: String,
    pub seed: u64,
}

impl Default for SimNodeProfile {
    fn default() -> Self {
        Self {
            count: 0,
            modules: ["core.general", "core.resources", "core.interfaces"].map(String::from).to_vec(),
            wrap_width_bits: 32,
            reboot_probability: 0.001,
            push_fraction: 0.5,
            report_interval_s: 10,
            down_probability: 0.05,
            device: "tp-wr741ndv1".into(),
            seed: 1,
        }
    }
}

pub const SIM_MODULES: [&str; 5] = ["core.general", "core.resources", "core.interfaces", "core.routing", "core.vpn"];

impl SimNodeProfile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, p) in [
            ("reboot_probability", self.reboot_probability),
            ("push_fraction", self.push_fraction),
            ("down_probability", self.down_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("fleet.{name} must lie in [0, 1]"));
            }
        }
        // Telemetry integers are signed 64-bit, so a full 64-bit counter cannot be reported.
        if !(1..=63).contains(&self.wrap_width_bits) {
            return bad("fleet.wrap_width_bits must lie in 1..=63".into());
        }
        if self.report_interval_s == 0 {
            return bad("fleet.report_interval_s must be at least 1".into());
        }
        if let Some(m) = self.modules.iter().find(|m| !SIM_MODULES.contains(&m.as_str())) {
            return bad(format!("fleet.modules: unknown module `{m}`"));
        }
        if !self.modules.iter().any(|m| m == "core.general") {
            return bad("fleet.modules must include core.general".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Where state is persisted; nothing is written when unset.
    pub data_dir: Option<PathBuf>,
    pub device_dir: PathBuf,
    pub pipelines: Vec<PipelineConfig>,
    pub pools: Vec<PoolConfig>,
    pub builders: Vec<BuilderConfig>,
    pub build_workers: usize,
    pub monitor_workers: usize,
    /// A node is online if its last report is younger than this.
    pub stale_after_s: i64,
    /// Interface counters are taken to wrap at `2^counter_bits`.
    pub counter_bits: u32,
    pub pull_timeout_ms: u64,
    /// Completed run reports kept for `GET /api/runs`.
    pub run_history: usize,
    pub fleet: Option<SimNodeProfile>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().expect("literal address"),
            data_dir: None,
            device_dir: "devices".into(),
            pipelines: vec![PipelineConfig {
                name: "monitoring".into(),
                interval_s: 60,
                processors: ProcessorCatalog::NAMES.map(String::from).to_vec(),
            }],
            pools: vec![PoolConfig { id: "mesh-v4".into(), prefix: "10.254.0.0/16".parse().expect("literal"), holddown_s: DEFAULT_HOLDDOWN_SECS }],
            builders: vec![
                BuilderConfig { id: "openwrt-ar71xx".into(), architectures: vec!["ar71xx".into()] },
                BuilderConfig { id: "routeros-mipsbe".into(), architectures: vec!["mipsbe".into()] },
            ],
            build_workers: 2,
            monitor_workers: 4,
            stale_after_s: 60,
            counter_bits: 32,
            pull_timeout_ms: 2_000,
            run_history: 500,
            fleet: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut names = BTreeSet::new();
        for p in &self.pipelines {
            if p.name.is_empty() {
                return bad("pipeline names must not be empty".into());
            }
            if !names.insert(&p.name) {
                return bad(format!("pipeline `{}` defined twice", p.name));
            }
            if p.interval_s == 0 {
                return bad(format!("pipeline `{}`: interval_s must be at least 1", p.name));
            }
            if let Some(x) = p.processors.iter().find(|x| !ProcessorCatalog::NAMES.contains(&x.as_str())) {
                return bad(format!("pipeline `{}`: unknown processor `{x}`", p.name));
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.pools {
            if !ids.insert(&p.id) {
                return bad(format!("pool `{}` defined twice", p.id));
            }
            if p.holddown_s < 0 {
                return bad(format!("pool `{}`: holddown_s must not be negative", p.id));
            }
        }
        if self.stale_after_s <= 0 {
            return bad("stale_after_s must be positive".into());
        }
        if !(1..=64).contains(&self.counter_bits) {
            return bad("counter_bits must lie in 1..=64".into());
        }
        if let Some(f) = &self.fleet {
            f.validate()?;
        }
        Ok(())
    }

    /// Largest value a counter of `bits` bits holds before it wraps.
    pub fn counter_max(&self) -> u64 {
        counter_max(self.counter_bits)
    }
}

pub fn counter_max(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ServiceConfig::default().validate().unwrap();
        let text = serde_json::to_string(&ServiceConfig::default()).unwrap();
        assert_eq!(ServiceConfig::from_json(&text).unwrap(), ServiceConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ServiceConfig::from_json(r#"{"listen": "0.0.0.0:1", "colour": 1}"#), Err(ConfigError::Invalid(_))));
        assert!(ServiceConfig::from_json(r#"{"fleet": {"count": 3, "speed": 2}}"#).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let cases = [
            r#"{"pipelines": [{"name": "a", "interval_s": 0, "processors": []}]}"#,
            r#"{"pipelines": [{"name": "a", "interval_s": 5, "processors": ["nope"]}]}"#,
            r#"{"pipelines": [{"name": "a", "interval_s": 5, "processors": []}, {"name": "a", "interval_s": 5, "processors": []}]}"#,
            r#"{"fleet": {"reboot_probability": 1.5}}"#,
            r#"{"fleet": {"modules": ["core.resources"]}}"#,
            r#"{"pools": [{"id": "p", "prefix": "10.0.0.1/8"}]}"#,
            r#"{"counter_bits": 0}"#,
        ];
        for c in cases {
            assert!(ServiceConfig::from_json(c).is_err(), "{c}");
        }
    }

    #[test]
    fn counter_max_is_all_ones() {
        assert_eq!(counter_max(8), 255);
        assert_eq!(counter_max(64), u64::MAX);
    }
}
