//! GPU-side system model: request type, system memory map with the HDM
//! decoder, and the last-level cache.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::REQUEST_BYTES;

pub const LINE_BYTES: u64 = REQUEST_BYTES;
/// HDM decoders program ranges at 256 MiB granularity.
pub const HDM_ALIGN: u64 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReqKind {
    Load,
    Store,
}

/// One 64B request leaving the LLC toward memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub kind: ReqKind,
    pub hpa: u64,
    pub issue_time: u64,
    pub sm_id: u32,
    pub tag: u64,
    /// Payload token for stores.
    pub data: u64,
}

impl MemRequest {
    pub fn load(hpa: u64, tag: u64, issue_time: u64) -> Self {
        debug_assert!(hpa % LINE_BYTES == 0, "unaligned load {hpa:#x}");
        MemRequest {
            kind: ReqKind::Load,
            hpa,
            issue_time,
            sm_id: 0,
            tag,
            data: 0,
        }
    }

    pub fn store(hpa: u64, tag: u64, issue_time: u64, data: u64) -> Self {
        debug_assert!(hpa % LINE_BYTES == 0, "unaligned store {hpa:#x}");
        MemRequest {
            kind: ReqKind::Store,
            hpa,
            issue_time,
            sm_id: 0,
            tag,
            data,
        }
    }

    pub fn size(&self) -> u64 {
        LINE_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    GpuLocal,
    PcieEpHost,
    CxlPort(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub base: u64,
    pub size: u64,
    pub target: Target,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, hpa: u64) -> bool {
        hpa >= self.base && hpa < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("region {0:?} has zero size")]
    Empty(Target),
    #[error("endpoint {index} base {base:#x} is not aligned to the 256 MiB HDM granularity")]
    Unaligned { index: usize, base: u64 },
    #[error("region {a:?} overlaps region {b:?}")]
    Overlap { a: Target, b: Target },
    #[error("region {0:?} extends past the host physical address space")]
    Oversized(Target),
    #[error("too many endpoints ({0}); at most 255 root ports are addressable")]
    TooManyPorts(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("host physical address {0:#x} is not mapped")]
pub struct Unmapped(pub u64);

/// What enumeration needs to know about an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointLayout {
    pub size: u64,
    pub base: Option<u64>,
}

/// Sorted, disjoint regions of the system bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    regions: Vec<Region>,
}

impl MemoryMap {
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region_of(&self, target: Target) -> Option<&Region> {
        self.regions.iter().find(|r| r.target == target)
    }

    pub fn hdm_regions(&self) -> impl Iterator<Item = &Region> {
        self.regions
            .iter()
            .filter(|r| matches!(r.target, Target::CxlPort(_)))
    }

    /// Routes `hpa` to its owning region and returns the device offset.
    pub fn hdm_decode(&self, hpa: u64) -> Result<(Target, u64), Unmapped> {
        let idx = self.regions.partition_point(|r| r.end() <= hpa);
        match self.regions.get(idx) {
            Some(r) if r.contains(hpa) => Ok((r.target, hpa - r.base)),
            _ => Err(Unmapped(hpa)),
        }
    }

    fn from_regions(mut regions: Vec<Region>) -> Result<Self, MapError> {
        regions.sort_by_key(|r| r.base);
        for r in &regions {
            if r.size == 0 {
                return Err(MapError::Empty(r.target));
            }
            if r.base.checked_add(r.size).is_none() {
                return Err(MapError::Oversized(r.target));
            }
        }
        for pair in regions.windows(2) {
            if pair[0].end() > pair[1].base {
                return Err(MapError::Overlap {
                    a: pair[0].target,
                    b: pair[1].target,
                });
            }
        }
        Ok(MemoryMap { regions })
    }
}

fn align_up(v: u64, align: u64) -> Option<u64> {
    v.checked_add(align - 1).map(|x| x / align * align)
}

/// Builds the system memory map: GPU-local memory at zero, the host window
/// above it, then one HDM range per endpoint. Endpoints without an explicit
/// base are packed contiguously at HDM granularity.
pub fn enumerate_endpoints(
    gpu_local_bytes: u64,
    host_window_bytes: u64,
    endpoints: &[EndpointLayout],
) -> Result<MemoryMap, MapError> {
    if endpoints.len() > usize::from(u8::MAX) {
        return Err(MapError::TooManyPorts(endpoints.len()));
    }
    let mut regions = Vec::with_capacity(endpoints.len() + 2);
    regions.push(Region {
        base: 0,
        size: gpu_local_bytes,
        target: Target::GpuLocal,
    });
    let host_base = align_up(gpu_local_bytes, HDM_ALIGN).ok_or(MapError::Oversized(Target::PcieEpHost))?;
    regions.push(Region {
        base: host_base,
        size: host_window_bytes,
        target: Target::PcieEpHost,
    });
    let mut cursor = host_base
        .checked_add(host_window_bytes)
        .and_then(|v| align_up(v, HDM_ALIGN))
        .ok_or(MapError::Oversized(Target::PcieEpHost))?;
    for (i, ep) in endpoints.iter().enumerate() {
        let target = Target::CxlPort(i as u8);
        let base = match ep.base {
            Some(base) if base % HDM_ALIGN != 0 => {
                return Err(MapError::Unaligned { index: i, base })
            }
            Some(base) => base,
            None => cursor,
        };
        regions.push(Region {
            base,
            size: ep.size,
            target,
        });
        let end = base.checked_add(ep.size).ok_or(MapError::Oversized(target))?;
        cursor = cursor.max(align_up(end, HDM_ALIGN).ok_or(MapError::Oversized(target))?);
    }
    MemoryMap::from_regions(regions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcConfig {
    pub capacity_bytes: u64,
    pub ways: usize,
    pub hit_ns: u64,
}

impl Default for LlcConfig {
    fn default() -> Self {
        LlcConfig {
            capacity_bytes: 64 << 10,
            ways: 4,
            hit_ns: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Way {
    tag: u64,
    valid: bool,
    dirty: bool,
    data: u64,
    last_used: u64,
}

/// A dirty line pushed out of the LLC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteBack {
    pub hpa: u64,
    pub data: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlcOutcome {
    Hit { data: u64 },
    /// The request must go downstream; a dirty victim, if any, must be
    /// written back first.
    Miss { writeback: Option<WriteBack> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
    pub evictions: u64,
}

/// Set-associative, LRU, write-back last-level cache.
///
/// Every request covers a whole line, so store misses allocate without
/// fetching. Load misses allocate only when the fill arrives.
#[derive(Debug, Clone)]
pub struct LlcModel {
    sets: usize,
    ways: usize,
    lines: Vec<Way>,
    clock: u64,
    stats: LlcStats,
}

impl LlcModel {
    pub fn new(cfg: &LlcConfig) -> Self {
        let ways = cfg.ways.max(1);
        let sets = ((cfg.capacity_bytes / LINE_BYTES) as usize / ways).max(1);
        LlcModel {
            sets,
            ways,
            lines: alloc::vec![Way::default(); sets * ways],
            clock: 0,
            stats: LlcStats::default(),
        }
    }

    pub fn stats(&self) -> LlcStats {
        self.stats
    }

    fn index(&self, hpa: u64) -> (usize, u64) {
        let line = hpa / LINE_BYTES;
        ((line % self.sets as u64) as usize, line / self.sets as u64)
    }

    fn find(&self, hpa: u64) -> Option<usize> {
        let (set, tag) = self.index(hpa);
        let base = set * self.ways;
        (base..base + self.ways).find(|&i| self.lines[i].valid && self.lines[i].tag == tag)
    }

    fn victim(&self, set: usize) -> usize {
        let base = set * self.ways;
        (base..base + self.ways)
            .min_by_key(|&i| (self.lines[i].valid, self.lines[i].last_used))
            .unwrap_or(base)
    }

    fn line_addr(&self, set: usize, tag: u64) -> u64 {
        (tag * self.sets as u64 + set as u64) * LINE_BYTES
    }

    fn install(&mut self, hpa: u64, data: u64, dirty: bool) -> Option<WriteBack> {
        let (set, tag) = self.index(hpa);
        let idx = self.victim(set);
        let old = self.lines[idx];
        let wb = if old.valid {
            self.stats.evictions += 1;
            old.dirty.then(|| WriteBack {
                hpa: self.line_addr(set, old.tag),
                data: old.data,
            })
        } else {
            None
        };
        if wb.is_some() {
            self.stats.writebacks += 1;
        }
        self.clock += 1;
        self.lines[idx] = Way {
            tag,
            valid: true,
            dirty,
            data,
            last_used: self.clock,
        };
        wb
    }

    /// Looks up a load. Misses do not allocate.
    pub fn load(&mut self, hpa: u64) -> Option<u64> {
        self.stats.accesses += 1;
        self.clock += 1;
        match self.find(hpa) {
            Some(i) => {
                self.stats.hits += 1;
                self.lines[i].last_used = self.clock;
                Some(self.lines[i].data)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Full-line store: hit marks dirty, miss allocates dirty.
    pub fn store(&mut self, hpa: u64, data: u64) -> LlcOutcome {
        self.stats.accesses += 1;
        self.clock += 1;
        match self.find(hpa) {
            Some(i) => {
                self.stats.hits += 1;
                let way = &mut self.lines[i];
                way.last_used = self.clock;
                way.dirty = true;
                way.data = data;
                LlcOutcome::Hit { data }
            }
            None => {
                self.stats.misses += 1;
                LlcOutcome::Miss {
                    writeback: self.install(hpa, data, true),
                }
            }
        }
    }

    /// Generic access: the combined lookup used by the request path.
    pub fn access(&mut self, req: &MemRequest) -> LlcOutcome {
        match req.kind {
            ReqKind::Load => match self.load(req.hpa) {
                Some(data) => LlcOutcome::Hit { data },
                None => LlcOutcome::Miss { writeback: None },
            },
            ReqKind::Store => self.store(req.hpa, req.data),
        }
    }

    /// Installs a clean line returned by a load miss. A line already present
    /// (written while the fill was outstanding) is left untouched.
    pub fn fill(&mut self, hpa: u64, data: u64) -> Option<WriteBack> {
        if self.find(hpa).is_some() {
            return None;
        }
        self.install(hpa, data, false)
    }

    pub fn contains(&self, hpa: u64) -> bool {
        self.find(hpa).is_some()
    }

    /// Dirty lines still held, keyed by address.
    pub fn dirty_lines(&self) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for set in 0..self.sets {
            for w in 0..self.ways {
                let way = &self.lines[set * self.ways + w];
                if way.valid && way.dirty {
                    out.insert(self.line_addr(set, way.tag), way.data);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn two_eps() -> MemoryMap {
        let eps = [
            EndpointLayout { size: GIB, base: None },
            EndpointLayout { size: GIB, base: None },
        ];
        enumerate_endpoints(GIB, GIB, &eps).unwrap()
    }

    #[test]
    fn enumerates_contiguous_hdm_ranges() {
        let map = two_eps();
        let hdm: Vec<_> = map.hdm_regions().copied().collect();
        assert_eq!(hdm.len(), 2);
        assert_eq!(hdm[0].target, Target::CxlPort(0));
        assert_eq!(hdm[1].target, Target::CxlPort(1));
        assert_eq!(hdm[0].base, 2 * GIB);
        assert_eq!(hdm[1].base, hdm[0].end());
        assert!(map.regions().windows(2).all(|w| w[0].end() <= w[1].base));
    }

    #[test]
    fn no_endpoints_leaves_local_and_host() {
        let map = enumerate_endpoints(GIB, GIB, &[]).unwrap();
        let targets: Vec<_> = map.regions().iter().map(|r| r.target).collect();
        assert_eq!(targets, [Target::GpuLocal, Target::PcieEpHost]);
    }

    #[test]
    fn duplicate_base_is_rejected() {
        let eps = [
            EndpointLayout { size: GIB, base: Some(4 * GIB) },
            EndpointLayout { size: GIB, base: Some(4 * GIB) },
        ];
        assert!(matches!(
            enumerate_endpoints(GIB, GIB, &eps),
            Err(MapError::Overlap { .. })
        ));
        let eps = [EndpointLayout { size: GIB, base: Some(GIB + 4096) }];
        assert!(matches!(
            enumerate_endpoints(GIB, GIB, &eps),
            Err(MapError::Unaligned { .. })
        ));
    }

    #[test]
    fn decode_routes_and_faults() {
        let map = two_eps();
        let port1 = *map.region_of(Target::CxlPort(1)).unwrap();
        assert_eq!(map.hdm_decode(port1.base), Ok((Target::CxlPort(1), 0)));
        assert_eq!(
            map.hdm_decode(port1.base + 0x1240),
            Ok((Target::CxlPort(1), 0x1240))
        );
        assert_eq!(map.hdm_decode(port1.end()), Err(Unmapped(port1.end())));
        assert_eq!(map.hdm_decode(0), Ok((Target::GpuLocal, 0)));
    }

    #[test]
    fn llc_repeat_load_hits() {
        let mut llc = LlcModel::new(&LlcConfig::default());
        assert_eq!(llc.load(0x40), None);
        assert_eq!(llc.fill(0x40, 5), None);
        assert_eq!(llc.load(0x40), Some(5));
        let s = llc.stats();
        assert_eq!((s.hits, s.misses, s.accesses), (1, 1, 2));
    }

    #[test]
    fn llc_streaming_evicts_and_writes_back() {
        let cfg = LlcConfig { capacity_bytes: 4096, ways: 4, hit_ns: 1 };
        let mut llc = LlcModel::new(&cfg);
        let lines = cfg.capacity_bytes / LINE_BYTES;
        let mut wbs = Vec::new();
        for i in 0..=lines {
            if let LlcOutcome::Miss { writeback: Some(wb) } = llc.store(i * 64, i + 100) {
                wbs.push(wb);
            }
        }
        assert!(llc.stats().evictions >= 1);
        // The first line written is the oldest in its set.
        assert_eq!(wbs, [WriteBack { hpa: 0, data: 100 }]);
    }

    #[test]
    fn fill_does_not_clobber_newer_store() {
        let mut llc = LlcModel::new(&LlcConfig::default());
        assert_eq!(llc.load(0x80), None);
        llc.store(0x80, 9);
        llc.fill(0x80, 1);
        assert_eq!(llc.load(0x80), Some(9));
        assert_eq!(llc.dirty_lines().get(&0x80), Some(&9));
    }
}
