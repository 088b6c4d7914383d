//! Run report and summary statistics.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::baselines::FaultStats;
use crate::dstore::{DsStats, SuspensionWindow, WriteMode};
use crate::endpoint::{CacheStats, EndpointStats, GcWindow, MediaKind};
use crate::fabric::{LlcStats, Region};
use crate::scenario::{Mode, ScenarioConfig};
use crate::srqueue::{SrCounters, SrPolicy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let exact = (p / 100.0) * sorted.len() as f64;
    let mut rank = exact as usize;
    if (rank as f64) < exact {
        rank += 1;
    }
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    pub fn from_samples(samples: impl Iterator<Item = u64>) -> Self {
        let mut v: Vec<u64> = samples.collect();
        if v.is_empty() {
            return LatencySummary::default();
        }
        v.sort_unstable();
        let sum: u128 = v.iter().map(|&x| u128::from(x)).sum();
        LatencySummary {
            count: v.len() as u64,
            mean_ns: sum as f64 / v.len() as f64,
            p50_ns: percentile(&v, 50.0),
            p99_ns: percentile(&v, 99.0),
            max_ns: *v.last().unwrap_or(&0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub mode: Mode,
    pub sr_policy: SrPolicy,
    pub seed: u64,
    pub trace_ops: u64,
    pub footprint_bytes: u64,
    pub data_base: u64,
    pub memory_map: Vec<Region>,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub total: u64,
    pub loads: u64,
    pub stores: u64,
    pub computes: u64,
    pub completed: u64,
    pub requests_issued: u64,
    pub requests_completed: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsReport {
    pub final_mode: WriteMode,
    pub stats: DsStats,
    pub suspension_windows: Vec<SuspensionWindow>,
    pub buffered_at_end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortReport {
    pub index: usize,
    pub sr: SrCounters,
    pub final_granularity: u64,
    pub halted_at_end: bool,
    pub ds: Option<DsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointReport {
    pub index: usize,
    pub media: MediaKind,
    pub cache: CacheStats,
    pub hit_rate: f64,
    pub stats: EndpointStats,
    pub ingress_capacity: u64,
    pub peak_utilization: f64,
    /// Highest occupancy seen while a GC was running.
    pub peak_utilization_in_gc: f64,
    pub gc_windows: Vec<GcWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub manifest: Manifest,
    pub exec_time_ns: u64,
    /// Execution time over the GPU_DRAM reference, when one was run.
    pub normalized_time: Option<f64>,
    pub ops: OpCounts,
    pub load_latency: LatencySummary,
    pub store_latency: LatencySummary,
    pub llc: LlcStats,
    pub ports: Vec<PortReport>,
    pub endpoints: Vec<EndpointReport>,
    pub faults: Option<FaultStats>,
    /// Faulting accesses whose latency was below the host intervention.
    pub fault_bound_violations: u64,
    /// Resident accesses that paid the host intervention.
    pub resident_bound_violations: u64,
}

impl MetricsReport {
    pub fn hit_rate(&self) -> f64 {
        let (hits, lookups) = self
            .endpoints
            .iter()
            .fold((0, 0), |(h, l), e| (h + e.cache.demand_hits(), l + e.cache.lookups()));
        if lookups == 0 {
            0.0
        } else {
            hits as f64 / lookups as f64
        }
    }

    pub fn gc_count(&self) -> usize {
        self.endpoints.iter().map(|e| e.gc_windows.len()).sum()
    }

    pub fn suspension_count(&self) -> usize {
        self.ports
            .iter()
            .filter_map(|p| p.ds.as_ref())
            .map(|d| d.suspension_windows.len())
            .sum()
    }
}

/// Time series kept outside the summary document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    /// (completion time, latency) per load op.
    pub load_latency: Vec<(u64, u64)>,
    pub store_latency: Vec<(u64, u64)>,
    /// Per endpoint: (time, occupied ingress slots).
    pub ingress_occupancy: Vec<Vec<(u64, u32)>>,
    /// Per port with DS: (time, buffered entries).
    pub ds_buffer: Vec<Vec<(u64, u32)>>,
}

/// Highest occupancy fraction inside any window. The value in force when a
/// window opens counts.
pub fn peak_within(series: &[(u64, u32)], windows: &[GcWindow], capacity: usize) -> f64 {
    let cap = capacity.max(1) as f64;
    let mut peak = 0u32;
    for w in windows {
        let start_idx = series.partition_point(|&(t, _)| t <= w.start);
        if start_idx > 0 {
            peak = peak.max(series[start_idx - 1].1);
        }
        for &(t, v) in &series[start_idx..] {
            if t >= w.end {
                break;
            }
            peak = peak.max(v);
        }
    }
    f64::from(peak) / cap
}

/// One row of a mode comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: Mode,
    pub exec_time_ns: u64,
    pub normalized_time: f64,
    pub speedup_vs_first: f64,
    pub hit_rate: f64,
    pub load_p50_ns: u64,
    pub load_p99_ns: u64,
    pub store_p50_ns: u64,
    pub store_p99_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub reference_exec_time_ns: u64,
    pub rows: Vec<ComparisonRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        let s = LatencySummary::from_samples([3u64, 1, 2].into_iter());
        assert_eq!((s.count, s.p50_ns, s.max_ns), (3, 2, 3));
    }

    #[test]
    fn peak_counts_value_at_window_open() {
        let series = [(0, 10), (50, 2), (200, 30)];
        let w = [GcWindow { start: 20, end: 100 }];
        assert_eq!(peak_within(&series, &w, 40), 0.25);
        let w = [GcWindow { start: 60, end: 100 }];
        assert_eq!(peak_within(&series, &w, 40), 0.05);
    }
}
