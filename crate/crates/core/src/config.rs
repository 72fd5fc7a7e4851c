//! Preset registry and scenario-file loading. Everything tunable lives in
//! the config layer: device/model presets ship embedded, a directory named
//! by `HPUSIM_CONFIG_DIR` can shadow them, and scenario files may start
//! from a preset and override individual keys.

use crate::model::{DeviceSpec, ModelConfig, ModelError, WorkloadConfig};
use crate::sim::{SimKnobs, SimPolicy};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

pub const CONFIG_DIR_ENV: &str = "HPUSIM_CONFIG_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("{0}")]
    Other(String),
}

const DEVICE_PRESETS: &[(&str, &str)] = &[
    ("a100-pcie", include_str!("../presets/a100-pcie.toml")),
    ("l40s", include_str!("../presets/l40s.toml")),
    ("h100-nvl", include_str!("../presets/h100-nvl.toml")),
    ("hpu", include_str!("../presets/hpu.toml")),
    (
        "hpu-prototype",
        include_str!("../presets/hpu-prototype.toml"),
    ),
];

const MODEL_PRESETS: &[(&str, &str)] = &[("llama2-7b", include_str!("../presets/llama2-7b.toml"))];

pub fn device_preset_names() -> Vec<&'static str> {
    DEVICE_PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn model_preset_names() -> Vec<&'static str> {
    MODEL_PRESETS.iter().map(|(n, _)| *n).collect()
}

fn preset_source(name: &str, table: &[(&str, &str)]) -> Option<String> {
    if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
        let path = Path::new(&dir).join(format!("{name}.toml"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Some(text);
        }
    }
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.to_string())
}

pub fn resolve_device(name: &str) -> Result<DeviceSpec, ConfigError> {
    let text = preset_source(name, DEVICE_PRESETS)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    let dev: DeviceSpec = toml::from_str(&text)?;
    dev.validate()?;
    Ok(dev)
}

pub fn resolve_model(name: &str) -> Result<ModelConfig, ConfigError> {
    let text = preset_source(name, MODEL_PRESETS)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    let m: ModelConfig = toml::from_str(&text)?;
    m.validate()?;
    Ok(m)
}

/// Deep-merges `over` into `base`: tables merge key-wise, everything else
/// replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Deserializes T from a table that may name a `preset` to start from.
fn from_preset_table<T: serde::de::DeserializeOwned>(
    mut table: toml::Table,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<T, ConfigError> {
    let value = if let Some(preset) = table.remove("preset") {
        let name = preset
            .as_str()
            .ok_or_else(|| ConfigError::Other("preset must be a string".into()))?;
        let text = lookup(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
        let mut base: toml::Value = toml::from_str(&text)?;
        merge(&mut base, toml::Value::Table(table));
        base
    } else {
        toml::Value::Table(table)
    };
    Ok(value.try_into()?)
}

/// Merges a partial table over a serialized default.
fn with_defaults<T>(default: T, over: Option<toml::Table>) -> Result<T, ConfigError>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut base = toml::Value::try_from(default)?;
    if let Some(table) = over {
        merge(&mut base, toml::Value::Table(table));
    }
    Ok(base.try_into()?)
}

#[derive(Debug, Deserialize)]
struct RawScenario {
    model: toml::Table,
    workload: WorkloadConfig,
    gpu: toml::Table,
    hpu: Option<RawHpu>,
    policy: Option<toml::Table>,
    knobs: Option<toml::Table>,
}

#[derive(Debug, Deserialize)]
struct RawHpu {
    #[serde(default = "one")]
    count: u64,
    #[serde(flatten)]
    spec: toml::Table,
}

fn one() -> u64 {
    1
}

/// A fully resolved scenario: who computes, what workload, which knobs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
    pub gpu: DeviceSpec,
    pub hpus: Vec<DeviceSpec>,
    pub policy: SimPolicy,
    pub knobs: SimKnobs,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ConfigError> {
    let raw: RawScenario = toml::from_str(text)?;
    let model: ModelConfig = from_preset_table(raw.model, |n| preset_source(n, MODEL_PRESETS))?;
    model.validate()?;
    let gpu: DeviceSpec = from_preset_table(raw.gpu, |n| preset_source(n, DEVICE_PRESETS))?;
    gpu.validate()?;
    raw.workload.validate()?;
    let mut hpus = Vec::new();
    if let Some(h) = raw.hpu {
        let spec: DeviceSpec = from_preset_table(h.spec, |n| preset_source(n, DEVICE_PRESETS))?;
        spec.validate()?;
        hpus = vec![spec; h.count as usize];
    }
    let policy = with_defaults(SimPolicy::default(), raw.policy)?;
    let knobs = with_defaults(SimKnobs::default(), raw.knobs)?;
    Ok(Scenario {
        model,
        workload: raw.workload,
        gpu,
        hpus,
        policy,
        knobs,
    })
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeviceKind;
    use crate::sim::Partition;

    #[test]
    fn builtin_presets_parse_and_validate() {
        for name in device_preset_names() {
            let dev = resolve_device(name).unwrap();
            assert_eq!(dev.name, name);
        }
        for name in model_preset_names() {
            let m = resolve_model(name).unwrap();
            assert_eq!(m.name, name);
        }
    }

    #[test]
    fn table_one_ratios() {
        assert_eq!(resolve_device("l40s").unwrap().perf_per_bw(), 419.0);
        assert_eq!(resolve_device("h100-nvl").unwrap().perf_per_bw(), 213.0);
        assert_eq!(resolve_device("hpu").unwrap().perf_per_bw(), 8.0);
        assert_eq!(resolve_device("hpu-prototype").unwrap().perf_per_bw(), 1.0);
        assert_eq!(resolve_device("a100-pcie").unwrap().perf_per_bw(), 203.0);
        // Derived ratio of the target accelerator stays within the
        // published 8 +- 0.1.
        let hpu = resolve_device("hpu").unwrap();
        assert!((hpu.derived_perf_per_bw() - 8.0).abs() < 0.1);
    }

    #[test]
    fn prototype_is_host_routed_hpu() {
        let p = resolve_device("hpu-prototype").unwrap();
        assert_eq!(p.kind, DeviceKind::Hpu);
        assert!(p.host_routed);
        assert_eq!(p.mem_capacity, 16 * (1 << 30));
        assert!(!resolve_device("hpu").unwrap().host_routed);
    }

    #[test]
    fn unknown_preset_errors() {
        assert!(matches!(
            resolve_device("rtx-9090"),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn scenario_with_presets_and_overrides() {
        let text = r#"
            [model]
            preset = "llama2-7b"

            [workload]
            batch_size = 64
            input_len = 1024
            output_len = 1024

            [gpu]
            preset = "l40s"

            [hpu]
            preset = "hpu-prototype"
            count = 4
            tdp = 140.0

            [policy]
            partition = "head_parallel"

            [knobs.efficiency]
            compute = 0.75
        "#;
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.model.num_layers, 32);
        assert_eq!(s.hpus.len(), 4);
        assert_eq!(s.hpus[0].tdp, 140.0);
        assert_eq!(s.hpus[0].mem_bandwidth, 460e9);
        assert_eq!(s.policy.partition, Partition::HeadParallel);
        assert_eq!(s.policy.num_subbatches, 2);
        assert_eq!(s.knobs.efficiency.compute, 0.75);
        assert_eq!(s.knobs.efficiency.memory, 0.90);
    }

    #[test]
    fn scenario_with_inline_devices() {
        let text = r#"
            [model]
            name = "tiny"
            num_layers = 2
            hidden_dim = 64
            num_q_heads = 8
            num_kv_heads = 2
            head_dim = 8
            ffn_dim = 128
            bytes_per_param = 2
            total_params = 100000

            [workload]
            batch_size = 4
            input_len = 32
            output_len = 8

            [gpu]
            name = "toy-gpu"
            kind = "gpu"
            mem_bandwidth = 1e11
            mem_capacity = 1073741824
            peak_flops = 1e13
            link_bandwidth = 1e10
            link_latency = 1e-6
            tdp = 100.0
        "#;
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.model.group_size(), 4);
        assert!(s.hpus.is_empty());
        assert_eq!(s.gpu.active_fraction, 0.8);
    }
}
