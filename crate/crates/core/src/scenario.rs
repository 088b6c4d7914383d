//! Scenario configuration.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BackingPath, PAGE_BYTES};
use crate::dstore::DsConfig;
use crate::endpoint::{EndpointConfig, EndpointError, MediaKind};
use crate::fabric::LlcConfig;
use crate::srqueue::{HintPoint, SrPolicy, QUEUE_CAPACITY, RING_CAPACITY};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    GpuDram,
    Uvm,
    Gds,
    Cxl,
    CxlSr,
    CxlDs,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::GpuDram, Mode::Uvm, Mode::Gds, Mode::Cxl, Mode::CxlSr, Mode::CxlDs];

    pub fn name(self) -> &'static str {
        match self {
            Mode::GpuDram => "GPU_DRAM",
            Mode::Uvm => "UVM",
            Mode::Gds => "GDS",
            Mode::Cxl => "CXL",
            Mode::CxlSr => "CXL_SR",
            Mode::CxlDs => "CXL_DS",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        let norm: String = s.chars().map(|c| if c == '-' { '_' } else { c.to_ascii_uppercase() }).collect();
        Mode::ALL.into_iter().find(|m| m.name() == norm)
    }

    pub fn is_cxl(self) -> bool {
        matches!(self, Mode::Cxl | Mode::CxlSr | Mode::CxlDs)
    }

    pub fn is_fault_based(self) -> bool {
        matches!(self, Mode::Uvm | Mode::Gds)
    }

    pub fn default_policy(self) -> SrPolicy {
        match self {
            Mode::CxlSr | Mode::CxlDs => SrPolicy::Windowed,
            _ => SrPolicy::Off,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuConfig {
    /// Outstanding 64B requests the SMs can have in flight.
    pub contexts: usize,
    pub local_bytes: u64,
    pub local_read_ns: u64,
    pub local_write_ns: u64,
    /// Front-end time to issue one memory request.
    pub issue_ns: u64,
    pub llc: LlcConfig,
}

impl Default for GpuConfig {
    fn default() -> Self {
        GpuConfig {
            contexts: 64,
            local_bytes: 4 << 20,
            local_read_ns: 120,
            local_write_ns: 120,
            issue_ns: 1,
            llc: LlcConfig::default(),
        }
    }
}

/// One PCIe 5.0 x8 link per root port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub hop_ns: u64,
    /// Controller processing on both ends, split evenly across directions.
    pub controller_rtt_ns: u64,
    pub bandwidth_mb_s: u64,
    pub header_bytes: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            hop_ns: 20,
            controller_rtt_ns: 80,
            bandwidth_mb_s: 32_000,
            header_bytes: 16,
        }
    }
}

impl LinkConfig {
    pub fn serialize_ns(&self, payload: u64) -> u64 {
        ((self.header_bytes + payload) * 1000).div_ceil(self.bandwidth_mb_s.max(1))
    }

    pub fn one_way_ns(&self) -> u64 {
        self.hop_ns + self.controller_rtt_ns / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub capacity: usize,
    pub ring: usize,
    #[serde(default)]
    pub hint_point: HintPoint,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            capacity: QUEUE_CAPACITY,
            ring: RING_CAPACITY,
            hint_point: HintPoint::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub host_intervention_ns: u64,
    pub servers: usize,
    /// Defaults to local memory capacity in pages.
    pub page_budget: Option<usize>,
    /// Host DRAM reached over PCIe.
    pub uvm_backing: BackingPath,
    /// Defaults to the first endpoint's media plus a PCIe DMA.
    pub gds_backing: Option<BackingPath>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            host_intervention_ns: 500_000,
            servers: 1,
            page_budget: None,
            uvm_backing: BackingPath {
                read_ns: 1_000,
                write_ns: 1_000,
                bandwidth_mb_s: 32_000,
            },
            gds_backing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    /// Overrides the mode's default hint policy.
    #[serde(default)]
    pub sr_policy: Option<SrPolicy>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gpu: GpuConfig,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub queue: QueueConfig,
    pub endpoints: Vec<EndpointConfig>,
    /// Defaults derive from the endpoint's write latency.
    #[serde(default)]
    pub ds: Option<DsConfig>,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default = "default_host_window")]
    pub host_window_bytes: u64,
}

fn default_host_window() -> u64 {
    1 << 30
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unsupported schema_version {found}, expected {SCHEMA_VERSION}")]
    Schema { found: u32 },
    #[error("{0} mode needs at least one endpoint")]
    NoEndpoints(Mode),
    #[error("endpoint {index}: {source}")]
    Endpoint { index: usize, source: EndpointError },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("queue capacity {0} is outside 1..=1024")]
    Queue(usize),
    #[error("the {mode} mode cannot use hint policy {policy:?}")]
    Policy { mode: Mode, policy: SrPolicy },
    #[error("trace footprint {footprint} does not fit in {available} bytes of {what}")]
    Footprint { footprint: u64, available: u64, what: &'static str },
    #[error("memory map: {0}")]
    Map(String),
}

impl ScenarioConfig {
    /// Default scenario for `mode` with one endpoint of `media`.
    pub fn new(mode: Mode, media: MediaKind) -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            name: String::new(),
            mode,
            sr_policy: None,
            seed: 0,
            gpu: GpuConfig::default(),
            link: LinkConfig::default(),
            queue: QueueConfig::default(),
            endpoints: alloc::vec![EndpointConfig::for_media(media)],
            ds: None,
            baseline: BaselineConfig::default(),
            host_window_bytes: default_host_window(),
        }
    }

    pub fn with_policy(mut self, policy: SrPolicy) -> Self {
        self.sr_policy = Some(policy);
        self
    }

    pub fn policy(&self) -> SrPolicy {
        self.sr_policy.unwrap_or(self.mode.default_policy())
    }

    pub fn ds_config(&self, ep: &EndpointConfig) -> DsConfig {
        self.ds.unwrap_or_else(|| DsConfig::for_write_latency(ep.timing.write_ns))
    }

    pub fn page_budget(&self) -> usize {
        self.baseline
            .page_budget
            .unwrap_or((self.gpu.local_bytes / PAGE_BYTES) as usize)
    }

    pub fn gds_backing(&self) -> BackingPath {
        if let Some(b) = self.baseline.gds_backing {
            return b;
        }
        let media = self
            .endpoints
            .first()
            .map_or(MediaKind::Znand.default_timing(), |e| e.timing);
        // Storage I/O, then DMA over the same PCIe link as UVM.
        BackingPath {
            read_ns: media.read_ns + self.baseline.uvm_backing.read_ns,
            write_ns: media.write_ns + self.baseline.uvm_backing.write_ns,
            bandwidth_mb_s: media.bandwidth_mb_s.min(self.baseline.uvm_backing.bandwidth_mb_s),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
            });
        }
        let g = &self.gpu;
        if g.contexts == 0 {
            return Err(ConfigError::Zero("gpu.contexts"));
        }
        if g.local_bytes == 0 {
            return Err(ConfigError::Zero("gpu.local_bytes"));
        }
        if g.llc.capacity_bytes < 64 || g.llc.ways == 0 {
            return Err(ConfigError::Zero("gpu.llc capacity and ways"));
        }
        if self.link.bandwidth_mb_s == 0 {
            return Err(ConfigError::Zero("link.bandwidth_mb_s"));
        }
        if !(1..=1024).contains(&self.queue.capacity) {
            return Err(ConfigError::Queue(self.queue.capacity));
        }
        if self.queue.ring == 0 {
            return Err(ConfigError::Zero("queue.ring"));
        }
        if self.baseline.servers == 0 {
            return Err(ConfigError::Zero("baseline.servers"));
        }
        if self.mode.is_cxl() && self.endpoints.is_empty() {
            return Err(ConfigError::NoEndpoints(self.mode));
        }
        if self.mode == Mode::Gds && self.endpoints.is_empty() && self.baseline.gds_backing.is_none() {
            return Err(ConfigError::NoEndpoints(self.mode));
        }
        if !self.mode.is_cxl() && self.policy() != SrPolicy::Off {
            return Err(ConfigError::Policy {
                mode: self.mode,
                policy: self.policy(),
            });
        }
        for (index, ep) in self.endpoints.iter().enumerate() {
            ep.validate().map_err(|source| ConfigError::Endpoint { index, source })?;
        }
        if let Some(ds) = &self.ds {
            if ds.flush_budget == 0 || ds.poll_interval_ns == 0 || ds.flush_interval_ns == 0 {
                return Err(ConfigError::Zero("ds flush_budget, poll and flush intervals"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("cxl-sr"), Some(Mode::CxlSr));
        assert_eq!(Mode::parse("nope"), None);
    }

    #[test]
    fn validation_catches_bad_values() {
        let ok = ScenarioConfig::new(Mode::CxlSr, MediaKind::Znand);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.schema_version = 7;
        assert!(matches!(c.validate(), Err(ConfigError::Schema { found: 7 })));
        let mut c = ok.clone();
        c.endpoints.clear();
        assert!(c.validate().is_err());
        let c = ScenarioConfig::new(Mode::Uvm, MediaKind::Znand).with_policy(SrPolicy::Naive);
        assert!(matches!(c.validate(), Err(ConfigError::Policy { .. })));
    }
}
