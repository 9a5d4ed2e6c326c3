//! On-disk schemas (TOML).
//!
//! A config file may carry any of `[domain]`, `[model]` and `[job]`:
//!
//! ```toml
//! schema_version = 1
//!
//! [domain]
//! preset = "heterogeneous-mix4"   # or list devices explicitly
//! mode = "gpu"
//!
//! [[domain.devices]]
//! kind = "nano"                    # start from a device preset ...
//! id = "kitchen-nano"
//! mem_capacity = 4294967296.0      # ... and override fields
//!
//! [domain.network]
//! default_bandwidth = 1e9          # bits/s
//! default_latency = 0.001          # s
//!
//! [model]
//! preset = "gpt2-s"
//!
//! [job]
//! micro_batch = 8
//! ```
//!
//! Plan files wrap an [`OrchestrationStrategy`] together with the domain it was
//! planned for, so `simulate` and `faults` can run them standalone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::platform::{DeviceProfile, ExecMode, NetworkModel, TrustedDomain};
use crate::scheduler::OrchestrationStrategy;
use crate::workload::{TrainingJob, TransformerSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<JobConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ExecMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<DeviceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkModel>,
}

/// A device either spelled out in full or derived from a preset `kind`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_throughput: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_throughput: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_capacity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usable_mem_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_idle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_cpu_busy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_gpu_busy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_net: Option<f64>,
}

impl DeviceEntry {
    pub fn resolve(&self) -> Result<DeviceProfile> {
        let base = match &self.kind {
            Some(kind) => Some(DeviceProfile::preset(kind, self.id.clone())?),
            None => None,
        };
        let pick = |name: &str, value: Option<f64>, preset: Option<f64>| {
            value.or(preset).ok_or_else(|| {
                Error::invalid(format!("devices[{}].{name}", self.id), "missing (no `kind` preset given)")
            })
        };
        let b = base.as_ref();
        Ok(DeviceProfile {
            id: self.id.clone(),
            cpu_throughput: pick("cpu_throughput", self.cpu_throughput, b.map(|d| d.cpu_throughput))?,
            gpu_throughput: self
                .gpu_throughput
                .or(b.map(|d| d.gpu_throughput))
                .unwrap_or(0.0),
            mem_capacity: pick("mem_capacity", self.mem_capacity, b.map(|d| d.mem_capacity))?,
            usable_mem_fraction: self
                .usable_mem_fraction
                .or(b.map(|d| d.usable_mem_fraction))
                .unwrap_or(0.9),
            power_idle: pick("power_idle", self.power_idle, b.map(|d| d.power_idle))?,
            power_cpu_busy: pick("power_cpu_busy", self.power_cpu_busy, b.map(|d| d.power_cpu_busy))?,
            power_gpu_busy: self
                .power_gpu_busy
                .or(b.map(|d| d.power_gpu_busy))
                .or(self.power_cpu_busy)
                .ok_or_else(|| Error::invalid(format!("devices[{}].power_gpu_busy", self.id), "missing"))?,
            power_net: self.power_net.or(b.map(|d| d.power_net)).unwrap_or(0.0),
        })
    }

    pub fn explicit(d: &DeviceProfile) -> Self {
        DeviceEntry {
            kind: None,
            id: d.id.clone(),
            cpu_throughput: Some(d.cpu_throughput),
            gpu_throughput: Some(d.gpu_throughput),
            mem_capacity: Some(d.mem_capacity),
            usable_mem_fraction: Some(d.usable_mem_fraction),
            power_idle: Some(d.power_idle),
            power_cpu_busy: Some(d.power_cpu_busy),
            power_gpu_busy: Some(d.power_gpu_busy),
            power_net: Some(d.power_net),
        }
    }
}

impl DomainConfig {
    pub fn resolve(&self) -> Result<TrustedDomain> {
        let mode = self.mode.unwrap_or_default();
        let mut domain = match &self.preset {
            Some(p) => TrustedDomain::preset(p, mode)?,
            None => {
                if self.devices.is_empty() {
                    return Err(Error::invalid("domain", "needs either `preset` or `devices`"));
                }
                TrustedDomain {
                    name: "custom".into(),
                    devices: Vec::new(),
                    network: NetworkModel::wireless_1000mbps(),
                    mode,
                }
            }
        };
        if !self.devices.is_empty() {
            domain.devices = self
                .devices
                .iter()
                .map(DeviceEntry::resolve)
                .collect::<Result<_>>()?;
        }
        if let Some(net) = &self.network {
            domain.network = net.clone();
        }
        if let Some(name) = &self.name {
            domain.name = name.clone();
        }
        domain.validate()?;
        Ok(domain)
    }

    /// Fully explicit description of `domain`.
    pub fn explicit(domain: &TrustedDomain) -> Self {
        DomainConfig {
            preset: None,
            name: Some(domain.name.clone()),
            mode: Some(domain.mode),
            devices: domain.devices.iter().map(DeviceEntry::explicit).collect(),
            network: Some(domain.network.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<u64>,
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<TransformerSpec> {
        let base = self.preset.as_deref().map(TransformerSpec::preset).transpose()?;
        let b = base.as_ref();
        let pick = |name: &str, value: Option<u64>, preset: Option<u64>| {
            value
                .or(preset)
                .ok_or_else(|| Error::invalid(format!("model.{name}"), "missing (no `preset` given)"))
        };
        let spec = TransformerSpec {
            name: self
                .name
                .clone()
                .or(b.map(|s| s.name.clone()))
                .unwrap_or_else(|| "custom".into()),
            num_blocks: pick("num_blocks", self.num_blocks, b.map(|s| s.num_blocks))?,
            hidden_size: pick("hidden_size", self.hidden_size, b.map(|s| s.hidden_size))?,
            num_heads: pick("num_heads", self.num_heads, b.map(|s| s.num_heads))?,
            vocab_size: pick("vocab_size", self.vocab_size, b.map(|s| s.vocab_size))?,
            mlp_ratio: self.mlp_ratio.or(b.map(|s| s.mlp_ratio)).unwrap_or(4),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Partial [`TrainingJob`]; unset fields come from [`TrainingJob::testbed`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub global_batch: Option<u64>,
    pub seq_len: Option<u64>,
    pub micro_batch: Option<u64>,
    pub dp_sync_period: Option<u64>,
    pub param_bytes: Option<f64>,
    pub optimizer_state_multiplier: Option<f64>,
    pub activation_bytes_factor: Option<f64>,
}

impl JobConfig {
    pub fn resolve(&self) -> Result<TrainingJob> {
        let d = TrainingJob::testbed();
        let job = TrainingJob {
            global_batch: self.global_batch.unwrap_or(d.global_batch),
            seq_len: self.seq_len.unwrap_or(d.seq_len),
            micro_batch: self.micro_batch.unwrap_or(d.micro_batch),
            dp_sync_period: self.dp_sync_period.unwrap_or(d.dp_sync_period),
            param_bytes: self.param_bytes.unwrap_or(d.param_bytes),
            optimizer_state_multiplier: self
                .optimizer_state_multiplier
                .unwrap_or(d.optimizer_state_multiplier),
            activation_bytes_factor: self.activation_bytes_factor.unwrap_or(d.activation_bytes_factor),
        };
        job.validate()?;
        Ok(job)
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        check_version(cfg.schema_version)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::invalid(
            "schema_version",
            format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}

/// Parses a config document and returns its validated domain.
pub fn load_domain(text: &str) -> Result<TrustedDomain> {
    ConfigFile::parse(text)?
        .domain
        .ok_or_else(|| Error::invalid("domain", "missing [domain] table"))?
        .resolve()
}

/// Serializes a domain as a fully explicit config document.
pub fn domain_to_toml(domain: &TrustedDomain) -> String {
    ConfigFile {
        schema_version: SCHEMA_VERSION,
        domain: Some(DomainConfig::explicit(domain)),
        ..Default::default()
    }
    .to_toml()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub domain: DomainConfig,
    pub strategy: OrchestrationStrategy,
}

impl PlanFile {
    pub fn new(domain: &TrustedDomain, strategy: OrchestrationStrategy) -> Self {
        PlanFile {
            schema_version: SCHEMA_VERSION,
            domain: DomainConfig::explicit(domain),
            strategy,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: PlanFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        check_version(f.schema_version)?;
        f.strategy.plan.validate()?;
        Ok(f)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}
