//! Devices, power states, wireless links and the two built-in testbeds.
//!
//! Throughputs and power draws are sustained effective values, roughly half
//! of datasheet peaks. They are declared, never measured.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GIB: f64 = (1u64 << 30) as f64;

/// Names of the built-in testbeds.
pub const TESTBED_PRESETS: [&str; 2] = ["homogeneous-nano4", "heterogeneous-mix4"];

/// Names of the built-in device profiles.
pub const DEVICE_PRESETS: [&str; 3] = ["nano", "tx2", "nx"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    #[serde(alias = "cpu")]
    CpuOnly,
    #[default]
    #[serde(alias = "gpu")]
    GpuEnabled,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::CpuOnly => "cpu",
            ExecMode::GpuEnabled => "gpu",
        })
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" | "cpu-only" => Ok(ExecMode::CpuOnly),
            "gpu" | "gpu-enabled" => Ok(ExecMode::GpuEnabled),
            other => Err(Error::invalid("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    /// Sustained FLOP/s on the CPU.
    pub cpu_throughput: f64,
    /// Sustained FLOP/s on the GPU, 0 when absent.
    pub gpu_throughput: f64,
    /// Bytes.
    pub mem_capacity: f64,
    #[serde(default = "default_usable_fraction")]
    pub usable_mem_fraction: f64,
    pub power_idle: f64,
    pub power_cpu_busy: f64,
    pub power_gpu_busy: f64,
    /// Added on top of idle while sending or receiving.
    pub power_net: f64,
}

fn default_usable_fraction() -> f64 {
    0.9
}

impl DeviceProfile {
    pub fn jetson_nano(id: impl Into<String>) -> Self {
        DeviceProfile {
            id: id.into(),
            cpu_throughput: 15e9,
            gpu_throughput: 240e9,
            mem_capacity: 4.0 * GIB,
            usable_mem_fraction: 0.9,
            power_idle: 2.0,
            power_cpu_busy: 7.0,
            power_gpu_busy: 10.0,
            power_net: 1.5,
        }
    }

    pub fn jetson_tx2(id: impl Into<String>) -> Self {
        DeviceProfile {
            id: id.into(),
            cpu_throughput: 30e9,
            gpu_throughput: 600e9,
            mem_capacity: 8.0 * GIB,
            usable_mem_fraction: 0.9,
            power_idle: 3.0,
            power_cpu_busy: 10.0,
            power_gpu_busy: 15.0,
            power_net: 1.5,
        }
    }

    pub fn jetson_nx(id: impl Into<String>) -> Self {
        DeviceProfile {
            id: id.into(),
            cpu_throughput: 60e9,
            gpu_throughput: 1200e9,
            mem_capacity: 8.0 * GIB,
            usable_mem_fraction: 0.9,
            power_idle: 4.0,
            power_cpu_busy: 12.0,
            power_gpu_busy: 20.0,
            power_net: 1.5,
        }
    }

    /// A device preset by kind (`nano`, `tx2`, `nx`).
    pub fn preset(kind: &str, id: impl Into<String>) -> Result<Self> {
        match kind {
            "nano" => Ok(Self::jetson_nano(id)),
            "tx2" => Ok(Self::jetson_tx2(id)),
            "nx" => Ok(Self::jetson_nx(id)),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("devices[{}].{name}", self.id);
        if self.id.is_empty() {
            return Err(Error::invalid("devices[].id", "must not be empty"));
        }
        for (name, v) in [
            ("cpu_throughput", self.cpu_throughput),
            ("gpu_throughput", self.gpu_throughput),
            ("power_idle", self.power_idle),
            ("power_cpu_busy", self.power_cpu_busy),
            ("power_gpu_busy", self.power_gpu_busy),
            ("power_net", self.power_net),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(field(name), "must be a non-negative number"));
            }
        }
        if !(self.mem_capacity.is_finite() && self.mem_capacity > 0.0) {
            return Err(Error::invalid(field("mem_capacity"), "must be positive"));
        }
        if !(self.usable_mem_fraction > 0.0 && self.usable_mem_fraction <= 1.0) {
            return Err(Error::invalid(field("usable_mem_fraction"), "must be in (0, 1]"));
        }
        if self.power_idle > self.power_cpu_busy {
            return Err(Error::invalid(field("power_cpu_busy"), "below idle power"));
        }
        if self.power_idle > self.power_gpu_busy {
            return Err(Error::invalid(field("power_gpu_busy"), "below idle power"));
        }
        if self.cpu_throughput <= 0.0 && self.gpu_throughput <= 0.0 {
            return Err(Error::invalid(field("cpu_throughput"), "device has no compute"));
        }
        Ok(())
    }

    /// The only memory figure feasibility checks consume.
    pub fn usable_memory(&self) -> f64 {
        self.mem_capacity * self.usable_mem_fraction
    }

    pub fn effective_throughput(&self, mode: ExecMode) -> f64 {
        effective_throughput(self, mode)
    }

    /// Power while computing in `mode`, on whichever unit is faster.
    pub fn busy_power(&self, mode: ExecMode) -> f64 {
        match mode {
            ExecMode::GpuEnabled if self.gpu_throughput > self.cpu_throughput => self.power_gpu_busy,
            _ => self.power_cpu_busy,
        }
    }

    pub fn comm_power(&self) -> f64 {
        self.power_idle + self.power_net
    }
}

/// FLOP/s a device sustains in the given mode.
pub fn effective_throughput(device: &DeviceProfile, mode: ExecMode) -> f64 {
    match mode {
        ExecMode::CpuOnly => device.cpu_throughput,
        ExecMode::GpuEnabled => device.cpu_throughput.max(device.gpu_throughput),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    /// bits/s
    pub bandwidth: f64,
    /// seconds
    pub latency: f64,
}

/// Pairwise dedicated links; pairs without an explicit entry use the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    /// bits/s
    pub default_bandwidth: f64,
    /// seconds
    pub default_latency: f64,
}

/// A resolved link: bandwidth in bytes/s and one-way latency in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub bytes_per_sec: f64,
    pub latency: f64,
}

impl Link {
    pub fn transfer_time(&self, bytes: f64) -> f64 {
        bytes / self.bytes_per_sec + self.latency
    }
}

impl NetworkModel {
    /// Uniform wireless network, 1000 Mbps and 1 ms per hop.
    pub fn wireless_1000mbps() -> Self {
        NetworkModel {
            links: Vec::new(),
            default_bandwidth: 1e9,
            default_latency: 1e-3,
        }
    }

    pub fn uniform(bandwidth_bps: f64, latency: f64) -> Self {
        NetworkModel {
            links: Vec::new(),
            default_bandwidth: bandwidth_bps,
            default_latency: latency,
        }
    }

    /// Overrides (or adds) the link between `a` and `b`.
    pub fn with_link(mut self, a: &str, b: &str, bandwidth_bps: f64, latency: f64) -> Self {
        self.links.retain(|l| !same_pair(l, a, b));
        self.links.push(LinkSpec {
            a: a.to_string(),
            b: b.to_string(),
            bandwidth: bandwidth_bps,
            latency,
        });
        self
    }

    pub fn link(&self, a: &str, b: &str) -> Link {
        let (bw, lat) = self
            .links
            .iter()
            .find(|l| same_pair(l, a, b))
            .map(|l| (l.bandwidth, l.latency))
            .unwrap_or((self.default_bandwidth, self.default_latency));
        Link {
            bytes_per_sec: bw / 8.0,
            latency: lat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.default_bandwidth.is_finite() && self.default_bandwidth > 0.0) {
            return Err(Error::invalid("network.default_bandwidth", "must be positive"));
        }
        if !(self.default_latency.is_finite() && self.default_latency >= 0.0) {
            return Err(Error::invalid("network.default_latency", "must be non-negative"));
        }
        for l in &self.links {
            if !(l.bandwidth.is_finite() && l.bandwidth > 0.0) {
                return Err(Error::invalid(
                    format!("network.links[{}-{}].bandwidth", l.a, l.b),
                    "must be positive",
                ));
            }
            if !(l.latency.is_finite() && l.latency >= 0.0) {
                return Err(Error::invalid(
                    format!("network.links[{}-{}].latency", l.a, l.b),
                    "must be non-negative",
                ));
            }
        }
        Ok(())
    }
}

fn same_pair(l: &LinkSpec, a: &str, b: &str) -> bool {
    (l.a == a && l.b == b) || (l.a == b && l.b == a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustedDomain {
    pub name: String,
    pub devices: Vec<DeviceProfile>,
    pub network: NetworkModel,
    pub mode: ExecMode,
}

impl TrustedDomain {
    pub fn new(
        name: impl Into<String>,
        devices: Vec<DeviceProfile>,
        network: NetworkModel,
        mode: ExecMode,
    ) -> Result<Self> {
        let domain = TrustedDomain {
            name: name.into(),
            devices,
            network,
            mode,
        };
        domain.validate()?;
        Ok(domain)
    }

    /// Four Jetson Nanos on a 1000 Mbps wireless network.
    pub fn homogeneous_nano4(mode: ExecMode) -> Self {
        let devices = (0..4)
            .map(|i| DeviceProfile::jetson_nano(format!("nano-{i}")))
            .collect();
        TrustedDomain {
            name: "homogeneous-nano4".into(),
            devices,
            network: NetworkModel::wireless_1000mbps(),
            mode,
        }
    }

    /// Two Nanos, one TX2 and one NX on a 1000 Mbps wireless network.
    pub fn heterogeneous_mix4(mode: ExecMode) -> Self {
        TrustedDomain {
            name: "heterogeneous-mix4".into(),
            devices: vec![
                DeviceProfile::jetson_nano("nano-0"),
                DeviceProfile::jetson_nano("nano-1"),
                DeviceProfile::jetson_tx2("tx2-0"),
                DeviceProfile::jetson_nx("nx-0"),
            ],
            network: NetworkModel::wireless_1000mbps(),
            mode,
        }
    }

    pub fn preset(name: &str, mode: ExecMode) -> Result<Self> {
        match name {
            "homogeneous-nano4" => Ok(Self::homogeneous_nano4(mode)),
            "heterogeneous-mix4" => Ok(Self::heterogeneous_mix4(mode)),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::invalid("devices", "domain has no devices"));
        }
        let mut seen = HashSet::new();
        for d in &self.devices {
            d.validate()?;
            if !seen.insert(d.id.as_str()) {
                return Err(Error::invalid("devices[].id", format!("duplicate id `{}`", d.id)));
            }
        }
        self.network.validate()?;
        for l in &self.network.links {
            for end in [&l.a, &l.b] {
                if !seen.contains(end.as_str()) {
                    return Err(Error::invalid(
                        "network.links",
                        format!("link endpoint `{end}` is not a device"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.devices
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDevice(id.to_string()))
    }

    pub fn device(&self, id: &str) -> Result<&DeviceProfile> {
        self.index_of(id).map(|i| &self.devices[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.id.clone()).collect()
    }

    pub fn throughput(&self, id: &str) -> Result<f64> {
        Ok(effective_throughput(self.device(id)?, self.mode))
    }

    /// The same domain restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let devices = ids
            .iter()
            .map(|id| self.device(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let mut network = self.network.clone();
        network
            .links
            .retain(|l| keep.contains(l.a.as_str()) && keep.contains(l.b.as_str()));
        Ok(TrustedDomain {
            name: self.name.clone(),
            devices,
            network,
            mode: self.mode,
        })
    }

    pub fn with_mode(&self, mode: ExecMode) -> Self {
        TrustedDomain {
            mode,
            ..self.clone()
        }
    }
}

/// Independent exponential device failures plus checkpoint I/O rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    /// seconds; may be infinite.
    pub mtbf_per_device: f64,
    /// bytes/s
    pub checkpoint_write_bandwidth: f64,
    /// bytes/s
    pub recovery_reload_bandwidth: f64,
    pub rng_seed: u64,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            mtbf_per_device: 86_400.0,
            checkpoint_write_bandwidth: 50e6,
            recovery_reload_bandwidth: 100e6,
            rng_seed: 0,
        }
    }
}

impl FaultModel {
    pub fn validate(&self) -> Result<()> {
        if self.mtbf_per_device.is_nan() || self.mtbf_per_device <= 0.0 {
            return Err(Error::invalid("mtbf_per_device", "must be positive"));
        }
        if !(self.checkpoint_write_bandwidth.is_finite() && self.checkpoint_write_bandwidth > 0.0) {
            return Err(Error::invalid("checkpoint_write_bandwidth", "must be positive"));
        }
        if !(self.recovery_reload_bandwidth.is_finite() && self.recovery_reload_bandwidth > 0.0) {
            return Err(Error::invalid("recovery_reload_bandwidth", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn testbed_presets() {
        let homo = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        assert_eq!(homo.devices.len(), 4);
        assert!(homo.devices.iter().all(|d| d.mem_capacity == 4.0 * GIB));
        assert_eq!(homo.network.link("nano-0", "nano-3").bytes_per_sec, 125e6);
        homo.validate().unwrap();

        let het = TrustedDomain::heterogeneous_mix4(ExecMode::GpuEnabled);
        let ids: Vec<_> = het.ids();
        assert_eq!(ids, ["nano-0", "nano-1", "tx2-0", "nx-0"]);
        het.validate().unwrap();
    }

    #[test]
    fn throughput_selector() {
        let nano = DeviceProfile::jetson_nano("n");
        assert_eq!(effective_throughput(&nano, ExecMode::GpuEnabled), 240e9);
        assert_eq!(effective_throughput(&nano, ExecMode::CpuOnly), 15e9);
        let cpu_only = DeviceProfile {
            gpu_throughput: 0.0,
            ..nano
        };
        assert_eq!(effective_throughput(&cpu_only, ExecMode::GpuEnabled), 15e9);
        assert_eq!(cpu_only.busy_power(ExecMode::GpuEnabled), cpu_only.power_cpu_busy);
    }

    #[test]
    fn gpu_is_cheaper_per_flop_on_presets() {
        for kind in DEVICE_PRESETS {
            let d = DeviceProfile::preset(kind, "x").unwrap();
            let per_flop = |m| d.busy_power(m) / effective_throughput(&d, m);
            assert!(per_flop(ExecMode::GpuEnabled) < per_flop(ExecMode::CpuOnly), "{kind}");
        }
    }

    #[test]
    fn zero_memory_rejected() {
        let mut d = DeviceProfile::jetson_nano("n0");
        d.mem_capacity = 0.0;
        let err = TrustedDomain::new("x", vec![d], NetworkModel::wireless_1000mbps(), ExecMode::GpuEnabled)
            .unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field.contains("mem_capacity")));
    }

    #[test]
    fn duplicate_ids_and_bad_links_rejected() {
        let d = DeviceProfile::jetson_nano("n0");
        let net = NetworkModel::wireless_1000mbps();
        assert!(TrustedDomain::new("x", vec![d.clone(), d.clone()], net.clone(), ExecMode::CpuOnly).is_err());
        let net = net.with_link("n0", "ghost", 1e8, 0.0);
        assert!(TrustedDomain::new("x", vec![d.clone()], net, ExecMode::CpuOnly).is_err());
        let zero = NetworkModel::uniform(0.0, 0.0);
        let err = TrustedDomain::new("x", vec![d], zero, ExecMode::CpuOnly).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "network.default_bandwidth"));
    }

    #[test]
    fn explicit_links_override_default() {
        let net = NetworkModel::wireless_1000mbps().with_link("a", "b", 1e8, 0.01);
        assert_eq!(net.link("b", "a").bytes_per_sec, 1.25e7);
        assert_eq!(net.link("a", "c").bytes_per_sec, 125e6);
    }
}
