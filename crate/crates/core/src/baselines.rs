//! Page-fault driven baselines: UVM migration from host memory and direct
//! storage DMA. Both pay the host runtime on every fault and differ only in
//! where the page comes from.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const PAGE_BYTES: u64 = 4096;

/// Latency and bandwidth of one backing transfer direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackingPath {
    pub read_ns: u64,
    pub write_ns: u64,
    pub bandwidth_mb_s: u64,
}

impl BackingPath {
    fn transfer_ns(&self, bytes: u64) -> u64 {
        (bytes * 1000).div_ceil(self.bandwidth_mb_s.max(1))
    }

    pub fn fetch_ns(&self, bytes: u64) -> u64 {
        self.read_ns + self.transfer_ns(bytes)
    }

    pub fn writeback_ns(&self, bytes: u64) -> u64 {
        self.write_ns + self.transfer_ns(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub host_intervention_ns: u64,
    pub page_budget: usize,
    /// Host runtime workers; faults beyond this many queue.
    pub servers: usize,
    /// GPU memory latency for resident pages.
    pub local_ns: u64,
    pub backing: BackingPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessClass {
    Resident,
    /// Started a migration.
    Fault,
    /// Touched a page whose migration was already under way.
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub complete_at: u64,
    pub class: AccessClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStats {
    pub accesses: u64,
    pub resident: u64,
    pub faults: u64,
    pub merged: u64,
    pub evictions: u64,
    pub dirty_writebacks: u64,
    pub min_fault_latency_ns: Option<u64>,
    pub max_resident_latency_ns: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct Page {
    touch: u64,
    dirty: bool,
    ready_at: u64,
}

/// Page residency in GPU memory plus the host runtime server pool.
#[derive(Debug, Clone)]
pub struct UvmState {
    cfg: FaultConfig,
    pages: BTreeMap<u64, Page>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
    servers: Vec<u64>,
    stats: FaultStats,
}

impl UvmState {
    pub fn new(cfg: FaultConfig) -> Self {
        UvmState {
            servers: alloc::vec![0; cfg.servers.max(1)],
            cfg,
            pages: BTreeMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
            stats: FaultStats::default(),
        }
    }

    pub fn config(&self) -> &FaultConfig {
        &self.cfg
    }

    pub fn stats(&self) -> FaultStats {
        self.stats
    }

    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn is_resident(&self, hpa: u64, now: u64) -> bool {
        self.pages.get(&(hpa / PAGE_BYTES)).is_some_and(|p| p.ready_at <= now)
    }

    fn touch(&mut self, page: u64) {
        self.clock += 1;
        if let Some(p) = self.pages.get_mut(&page) {
            self.lru.remove(&p.touch);
            p.touch = self.clock;
            self.lru.insert(self.clock, page);
        }
    }

    /// Evicts the least recently used page that has finished migrating.
    /// Returns whether it was dirty.
    fn evict(&mut self, now: u64) -> Option<bool> {
        let (&touch, &page) = self.lru.iter().find(|(_, pg)| self.pages[pg].ready_at <= now)?;
        self.lru.remove(&touch);
        let p = self.pages.remove(&page)?;
        self.stats.evictions += 1;
        Some(p.dirty)
    }

    /// One GPU access that missed the LLC.
    pub fn access(&mut self, hpa: u64, is_write: bool, now: u64) -> Access {
        self.stats.accesses += 1;
        let page = hpa / PAGE_BYTES;
        if let Some(p) = self.pages.get_mut(&page) {
            p.dirty |= is_write;
            let ready = p.ready_at;
            self.touch(page);
            if ready <= now {
                self.stats.resident += 1;
                let lat = self.cfg.local_ns;
                self.stats.max_resident_latency_ns = Some(self.stats.max_resident_latency_ns.map_or(lat, |m| m.max(lat)));
                return Access {
                    complete_at: now + lat,
                    class: AccessClass::Resident,
                };
            }
            self.stats.merged += 1;
            return Access {
                complete_at: ready + self.cfg.local_ns,
                class: AccessClass::Merged,
            };
        }
        self.stats.faults += 1;
        // The earliest free host runtime worker takes the fault.
        let (idx, &free_at) = self
            .servers
            .iter()
            .enumerate()
            .min_by_key(|(i, t)| (**t, *i))
            .expect("at least one server");
        let start = now.max(free_at);
        let mut t = start + self.cfg.host_intervention_ns;
        if self.pages.len() >= self.cfg.page_budget.max(1) {
            if let Some(true) = self.evict(now) {
                self.stats.dirty_writebacks += 1;
                t += self.cfg.backing.writeback_ns(PAGE_BYTES);
            }
        }
        t += self.cfg.backing.fetch_ns(PAGE_BYTES);
        self.servers[idx] = t;
        self.clock += 1;
        self.pages.insert(
            page,
            Page {
                touch: self.clock,
                dirty: is_write,
                ready_at: t,
            },
        );
        self.lru.insert(self.clock, page);
        let complete_at = t + self.cfg.local_ns;
        let lat = complete_at - now;
        self.stats.min_fault_latency_ns = Some(self.stats.min_fault_latency_ns.map_or(lat, |m| m.min(lat)));
        Access {
            complete_at,
            class: AccessClass::Fault,
        }
    }
}

/// UVM: pages come from host DRAM over PCIe.
pub fn uvm_access(state: &mut UvmState, hpa: u64, is_write: bool, now: u64) -> Access {
    state.access(hpa, is_write, now)
}

/// Direct storage DMA: pages come from the SSD straight into GPU memory.
/// The state must have been built with a storage backing path.
pub fn gds_access(state: &mut UvmState, hpa: u64, is_write: bool, now: u64) -> Access {
    state.access(hpa, is_write, now)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(backing: BackingPath) -> FaultConfig {
        FaultConfig {
            host_intervention_ns: 500_000,
            page_budget: 2,
            servers: 1,
            local_ns: 120,
            backing,
        }
    }

    const HOST: BackingPath = BackingPath {
        read_ns: 1_000,
        write_ns: 1_000,
        bandwidth_mb_s: 32_000,
    };

    #[test]
    fn second_touch_is_local() {
        let mut s = UvmState::new(cfg(HOST));
        let a = uvm_access(&mut s, 0x1000, false, 0);
        assert_eq!(a.class, AccessClass::Fault);
        assert!(a.complete_at >= 500_000);
        let b = uvm_access(&mut s, 0x1040, false, a.complete_at);
        assert_eq!(b, Access { complete_at: a.complete_at + 120, class: AccessClass::Resident });
    }

    #[test]
    fn streaming_faults_every_page_and_serializes() {
        let mut s = UvmState::new(cfg(HOST));
        let mut last = 0;
        for p in 0..8 {
            let a = uvm_access(&mut s, p * PAGE_BYTES, false, 0);
            assert_eq!(a.class, AccessClass::Fault);
            assert!(a.complete_at > last);
            last = a.complete_at;
        }
        assert!(s.resident_pages() <= 8);
        assert_eq!(s.stats().faults, 8);
    }

    #[test]
    fn dirty_victim_adds_writeback() {
        let mut s = UvmState::new(cfg(HOST));
        let a = uvm_access(&mut s, 0, true, 0);
        let b = uvm_access(&mut s, PAGE_BYTES, false, a.complete_at);
        let clean = b.complete_at - a.complete_at;
        let c = uvm_access(&mut s, 2 * PAGE_BYTES, false, b.complete_at);
        assert_eq!(c.complete_at - b.complete_at, clean + HOST.writeback_ns(PAGE_BYTES));
        assert!(s.resident_pages() <= 2);
    }

    #[test]
    fn identical_backing_gives_identical_times() {
        let mut u = UvmState::new(cfg(HOST));
        let mut g = UvmState::new(cfg(HOST));
        for (i, a) in [0u64, 0x2000, 0x40, 0x9000, 0x2040].iter().enumerate() {
            let now = i as u64 * 10;
            assert_eq!(uvm_access(&mut u, *a, i % 2 == 0, now), gds_access(&mut g, *a, i % 2 == 0, now));
        }
    }
}
