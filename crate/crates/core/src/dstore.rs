//! Deterministic store: stores complete at GPU-memory speed while the SSD
//! copy is written in the background or parked in a GPU-resident buffer.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::protocol::{DevLoad, REQUEST_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsConfig {
    /// GPU memory set aside for buffered stores.
    pub reserved_bytes: u64,
    /// A write slower than this suspends the port.
    pub slow_threshold_ns: u64,
    /// Flush writes allowed in flight at once.
    pub flush_budget: usize,
    pub poll_interval_ns: u64,
    pub flush_interval_ns: u64,
}

impl DsConfig {
    /// Defaults derived from the endpoint's nominal write latency.
    pub fn for_write_latency(write_ns: u64) -> Self {
        DsConfig {
            reserved_bytes: 1 << 20,
            slow_threshold_ns: 2 * write_ns,
            flush_budget: 4,
            poll_interval_ns: 10_000,
            flush_interval_ns: 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WriteMode {
    Dual,
    Suspended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    hpa: u64,
    data: u64,
    push_time: u64,
    flushing: bool,
    redirtied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferFull;

/// Deferred stores kept in reserved GPU memory.
///
/// Slots are numbered in push order; `addr_map` finds the live slot of an
/// address. A store to an address already buffered rewrites its slot.
#[derive(Debug, Clone)]
pub struct StoreBuffer {
    capacity: usize,
    stack: BTreeMap<u64, Slot>,
    addr_map: BTreeMap<u64, u64>,
    next_seq: u64,
}

impl StoreBuffer {
    pub fn new(reserved_bytes: u64) -> Self {
        StoreBuffer {
            capacity: (reserved_bytes / REQUEST_BYTES) as usize,
            stack: BTreeMap::new(),
            addr_map: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bytes(&self) -> u64 {
        self.stack.len() as u64 * REQUEST_BYTES
    }

    pub fn get(&self, hpa: u64) -> Option<u64> {
        self.addr_map.get(&hpa).map(|seq| self.stack[seq].data)
    }

    /// Pushes or rewrites in place. Returns true for an in-place update.
    pub fn put(&mut self, hpa: u64, data: u64, now: u64) -> Result<bool, BufferFull> {
        if let Some(seq) = self.addr_map.get(&hpa) {
            let slot = self.stack.get_mut(seq).expect("addr_map points at a live slot");
            slot.data = data;
            if slot.flushing {
                slot.redirtied = true;
            }
            return Ok(true);
        }
        if self.stack.len() >= self.capacity {
            return Err(BufferFull);
        }
        self.next_seq += 1;
        self.stack.insert(
            self.next_seq,
            Slot {
                hpa,
                data,
                push_time: now,
                flushing: false,
                redirtied: false,
            },
        );
        self.addr_map.insert(hpa, self.next_seq);
        Ok(false)
    }

    /// Oldest slots not already being flushed.
    fn flush_candidates(&self, n: usize) -> Vec<(u64, u64, u64)> {
        self.stack
            .iter()
            .filter(|(_, s)| !s.flushing)
            .take(n)
            .map(|(&seq, s)| (seq, s.hpa, s.data))
            .collect()
    }

    fn mark_flushing(&mut self, seq: u64) {
        if let Some(s) = self.stack.get_mut(&seq) {
            s.flushing = true;
            s.redirtied = false;
        }
    }

    /// A flush write was acknowledged. The slot is freed unless it was
    /// rewritten while the write was in flight. Returns true when freed.
    fn complete_flush(&mut self, seq: u64) -> bool {
        let Some(slot) = self.stack.get_mut(&seq) else { return false };
        if slot.redirtied {
            slot.flushing = false;
            slot.redirtied = false;
            return false;
        }
        let hpa = slot.hpa;
        self.stack.remove(&seq);
        self.addr_map.remove(&hpa);
        true
    }

    /// Age of the oldest buffered store.
    pub fn oldest_push(&self) -> Option<u64> {
        self.stack.values().map(|s| s.push_time).min()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.stack.values().map(|s| (s.hpa, s.data))
    }

    pub fn is_consistent(&self) -> bool {
        self.addr_map.len() == self.stack.len()
            && self
                .addr_map
                .iter()
                .all(|(hpa, seq)| self.stack.get(seq).is_some_and(|s| s.hpa == *hpa))
    }
}

/// What the port must do with a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreAction {
    /// Send a MemWr now; the store is already complete for the GPU.
    Dual,
    /// Parked in the buffer; complete for the GPU.
    Buffered,
    /// Rewrote a buffered slot; complete for the GPU.
    Updated,
    /// Buffer full while suspended. The store waits and is written through
    /// after the port resumes; it completes on the endpoint's response.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Suspend,
    Resume,
}

/// One buffered store chosen for flushing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushItem {
    pub seq: u64,
    pub hpa: u64,
    pub data: u64,
}

/// A deferred store released for write-through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Released {
    pub owner: u64,
    pub hpa: u64,
    pub data: u64,
}

#[derive(Debug, Clone, Copy)]
struct Inflight {
    issued: u64,
    flush_seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsStats {
    pub dual_writes: u64,
    pub buffered: u64,
    pub updated: u64,
    pub flushed: u64,
    pub overflows: u64,
    pub written_through: u64,
    pub suspensions: u64,
    pub resumes: u64,
    pub intercepted_loads: u64,
    pub peak_entries: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspensionWindow {
    pub start: u64,
    pub end: Option<u64>,
}

/// Per-port DS engine.
#[derive(Debug, Clone)]
pub struct DeterministicStore {
    cfg: DsConfig,
    buffer: StoreBuffer,
    mode: WriteMode,
    last_write_latency: u64,
    inflight: BTreeMap<u64, Inflight>,
    deferred: VecDeque<Released>,
    stats: DsStats,
    windows: Vec<SuspensionWindow>,
    occupancy_series: Vec<(u64, u32)>,
}

impl DeterministicStore {
    pub fn new(cfg: DsConfig) -> Self {
        DeterministicStore {
            buffer: StoreBuffer::new(cfg.reserved_bytes),
            cfg,
            mode: WriteMode::Dual,
            last_write_latency: 0,
            inflight: BTreeMap::new(),
            deferred: VecDeque::new(),
            stats: DsStats::default(),
            windows: Vec::new(),
            occupancy_series: Vec::new(),
        }
    }

    pub fn config(&self) -> &DsConfig {
        &self.cfg
    }

    pub fn mode(&self) -> WriteMode {
        self.mode
    }

    pub fn buffer(&self) -> &StoreBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> DsStats {
        self.stats
    }

    pub fn last_write_latency(&self) -> u64 {
        self.last_write_latency
    }

    pub fn suspension_windows(&self) -> &[SuspensionWindow] {
        &self.windows
    }

    pub fn occupancy_series(&self) -> &[(u64, u32)] {
        &self.occupancy_series
    }

    pub fn writes_in_flight(&self) -> usize {
        self.inflight.len()
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    fn flushes_in_flight(&self) -> usize {
        self.inflight.values().filter(|f| f.flush_seq.is_some()).count()
    }

    fn record(&mut self, now: u64) {
        let n = self.buffer.len() as u32;
        self.stats.peak_entries = self.stats.peak_entries.max(u64::from(n));
        match self.occupancy_series.last_mut() {
            Some((t, v)) if *t == now => *v = n,
            Some((_, v)) if *v == n => {}
            _ => self.occupancy_series.push((now, n)),
        }
    }

    fn suspend(&mut self, now: u64) -> Option<Transition> {
        if self.mode == WriteMode::Suspended {
            return None;
        }
        self.mode = WriteMode::Suspended;
        self.stats.suspensions += 1;
        self.windows.push(SuspensionWindow { start: now, end: None });
        Some(Transition::Suspend)
    }

    fn resume(&mut self, now: u64) -> Option<Transition> {
        if self.mode == WriteMode::Dual {
            return None;
        }
        self.mode = WriteMode::Dual;
        self.stats.resumes += 1;
        if let Some(w) = self.windows.last_mut() {
            w.end = Some(now);
        }
        Some(Transition::Resume)
    }

    /// Handles a store to an SSD-backed address. `backpressured` means the
    /// port cannot take another write right now; the store is then parked
    /// exactly as if the port were suspended.
    ///
    /// Returns the action and any mode change it caused.
    pub fn on_store(
        &mut self,
        owner: u64,
        hpa: u64,
        data: u64,
        now: u64,
        backpressured: bool,
    ) -> (StoreAction, Option<Transition>) {
        let mut tr = None;
        // A write still unanswered past the threshold is a slow write.
        if self.mode == WriteMode::Dual
            && self
                .inflight
                .values()
                .any(|f| now.saturating_sub(f.issued) > self.cfg.slow_threshold_ns)
        {
            tr = self.suspend(now);
        }
        let action = if self.buffer.get(hpa).is_some() {
            self.buffer.put(hpa, data, now).expect("update in place never overflows");
            self.stats.updated += 1;
            StoreAction::Updated
        } else if self.mode == WriteMode::Dual && !backpressured && self.deferred.is_empty() {
            self.stats.dual_writes += 1;
            StoreAction::Dual
        } else if self.buffer.put(hpa, data, now).is_ok() {
            self.stats.buffered += 1;
            StoreAction::Buffered
        } else {
            self.stats.overflows += 1;
            self.deferred.push_back(Released { owner, hpa, data });
            StoreAction::Deferred
        };
        self.record(now);
        (action, tr)
    }

    /// Registers a MemWr sent for this port, either a dual write, a
    /// released write-through or a flush of slot `flush_seq`.
    pub fn track_write(&mut self, tag: u64, now: u64, flush_seq: Option<u64>) {
        if let Some(seq) = flush_seq {
            self.buffer.mark_flushing(seq);
        }
        self.inflight.insert(tag, Inflight { issued: now, flush_seq });
    }

    pub fn is_tracked(&self, tag: u64) -> bool {
        self.inflight.contains_key(&tag)
    }

    /// Mode decision for one write response.
    pub fn detect_slow_write(&self, write_latency: u64, devload: DevLoad) -> Option<WriteMode> {
        let slow = write_latency > self.cfg.slow_threshold_ns;
        let busy = matches!(devload, DevLoad::Moderate | DevLoad::Severe);
        (self.mode == WriteMode::Dual && (slow || busy)).then_some(WriteMode::Suspended)
    }

    /// Write response for a tracked MemWr.
    pub fn on_write_response(&mut self, tag: u64, devload: DevLoad, now: u64) -> Option<Transition> {
        let f = self.inflight.remove(&tag)?;
        let latency = now - f.issued;
        self.last_write_latency = latency;
        if let Some(seq) = f.flush_seq {
            if self.buffer.complete_flush(seq) {
                self.stats.flushed += 1;
            }
        }
        self.record(now);
        match self.detect_slow_write(latency, devload) {
            Some(WriteMode::Suspended) => self.suspend(now),
            _ => None,
        }
    }

    /// DevLoad carried by any other response on this port.
    pub fn on_devload(&mut self, devload: DevLoad, now: u64) -> Option<Transition> {
        if self.mode == WriteMode::Dual && matches!(devload, DevLoad::Moderate | DevLoad::Severe) {
            self.suspend(now)
        } else {
            None
        }
    }

    /// Result of a probe sent while suspended.
    pub fn on_probe(&mut self, devload: DevLoad, now: u64) -> Option<Transition> {
        if self.mode == WriteMode::Suspended && matches!(devload, DevLoad::Light | DevLoad::Optimal) {
            self.resume(now)
        } else {
            None
        }
    }

    /// Deferred stores to write through, oldest first. Empty while
    /// suspended.
    pub fn take_released(&mut self) -> Vec<Released> {
        if self.mode == WriteMode::Suspended {
            return Vec::new();
        }
        self.stats.written_through += self.deferred.len() as u64;
        self.deferred.drain(..).collect()
    }

    /// Picks up to `budget` minus the flushes already in flight, capped by
    /// `allowed`, oldest first. Nothing while suspended.
    pub fn flush_step(&mut self, allowed: usize) -> Vec<FlushItem> {
        if self.mode == WriteMode::Suspended {
            return Vec::new();
        }
        let room = self.cfg.flush_budget.saturating_sub(self.flushes_in_flight()).min(allowed);
        self.buffer
            .flush_candidates(room)
            .into_iter()
            .map(|(seq, hpa, data)| FlushItem { seq, hpa, data })
            .collect()
    }

    pub fn has_flush_work(&self) -> bool {
        self.buffer.stack.values().any(|s| !s.flushing)
    }

    /// Whether a load to `hpa` would be served on the GPU side.
    pub fn holds(&self, hpa: u64) -> bool {
        self.buffer.get(hpa).is_some() || self.deferred.iter().any(|d| d.hpa == hpa)
    }

    /// Newest value for `hpa` held on the GPU side, if any.
    pub fn intercept_load(&mut self, hpa: u64) -> Option<u64> {
        let hit = self
            .buffer
            .get(hpa)
            .or_else(|| self.deferred.iter().rev().find(|d| d.hpa == hpa).map(|d| d.data));
        if hit.is_some() {
            self.stats.intercepted_loads += 1;
        }
        hit
    }

    /// GPU-side values not yet on the endpoint: buffered slots, overridden
    /// by deferred stores in order.
    pub fn pending_image(&self) -> BTreeMap<u64, u64> {
        let mut m: BTreeMap<u64, u64> = BTreeMap::new();
        for s in self.buffer.stack.values() {
            m.insert(s.hpa, s.data);
        }
        for d in &self.deferred {
            m.insert(d.hpa, d.data);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds() -> DeterministicStore {
        DeterministicStore::new(DsConfig::for_write_latency(60_000))
    }

    #[test]
    fn dual_then_suspend_then_buffer() {
        let mut d = ds();
        assert_eq!(d.on_store(1, 0x40, 1, 0, false), (StoreAction::Dual, None));
        d.track_write(100, 0, None);
        assert_eq!(d.on_write_response(100, DevLoad::Severe, 50), Some(Transition::Suspend));
        assert_eq!(d.on_store(2, 0x80, 2, 60, false).0, StoreAction::Buffered);
        assert_eq!(d.on_store(3, 0x80, 3, 70, false).0, StoreAction::Updated);
        assert_eq!(d.buffer().len(), 1);
        assert_eq!(d.intercept_load(0x80), Some(3));
        assert_eq!(d.intercept_load(0x40), None);
        assert!(d.flush_step(16).is_empty());
    }

    #[test]
    fn slow_threshold_and_resume_rules() {
        let mut d = ds();
        assert_eq!(d.detect_slow_write(72_000, DevLoad::Optimal), None);
        assert_eq!(d.detect_slow_write(72_000, DevLoad::Severe), Some(WriteMode::Suspended));
        assert_eq!(d.detect_slow_write(130_000, DevLoad::Light), Some(WriteMode::Suspended));
        d.on_devload(DevLoad::Moderate, 5);
        assert_eq!(d.mode(), WriteMode::Suspended);
        // Only probes resume.
        assert_eq!(d.on_devload(DevLoad::Light, 6), None);
        assert_eq!(d.on_probe(DevLoad::Moderate, 7), None);
        assert_eq!(d.on_probe(DevLoad::Light, 8), Some(Transition::Resume));
        assert_eq!(d.suspension_windows(), &[SuspensionWindow { start: 5, end: Some(8) }]);
    }

    #[test]
    fn flush_budget_arithmetic() {
        let mut d = ds();
        d.on_devload(DevLoad::Severe, 0);
        for i in 0..10 {
            d.on_store(i, i * 64, i, 1, false);
        }
        d.on_probe(DevLoad::Light, 2);
        let batch = d.flush_step(usize::MAX);
        assert_eq!(batch.len(), 4);
        assert_eq!(batch[0].hpa, 0);
        for (i, f) in batch.iter().enumerate() {
            d.track_write(1000 + i as u64, 3, Some(f.seq));
        }
        assert!(d.flush_step(usize::MAX).is_empty());
        assert_eq!(d.buffer().len(), 10);
        d.on_write_response(1000, DevLoad::Light, 10);
        assert_eq!(d.buffer().len(), 9);
        assert_eq!(d.flush_step(usize::MAX).len(), 1);
    }

    #[test]
    fn redirtied_slot_survives_flush() {
        let mut d = ds();
        d.on_devload(DevLoad::Severe, 0);
        d.on_store(1, 0x100, 1, 0, false);
        d.on_probe(DevLoad::Light, 1);
        let f = d.flush_step(4)[0];
        d.track_write(7, 1, Some(f.seq));
        assert_eq!(d.on_store(2, 0x100, 2, 2, false).0, StoreAction::Updated);
        d.on_write_response(7, DevLoad::Light, 3);
        assert_eq!(d.buffer().get(0x100), Some(2));
        assert_eq!(d.flush_step(4)[0].data, 2);
    }

    #[test]
    fn overflow_defers_until_resume() {
        let mut d = DeterministicStore::new(DsConfig {
            reserved_bytes: 128,
            ..DsConfig::for_write_latency(60_000)
        });
        d.on_devload(DevLoad::Severe, 0);
        d.on_store(1, 0, 1, 0, false);
        d.on_store(2, 64, 2, 0, false);
        assert_eq!(d.on_store(3, 128, 3, 0, false).0, StoreAction::Deferred);
        assert_eq!(d.intercept_load(128), Some(3));
        assert!(d.take_released().is_empty());
        d.on_probe(DevLoad::Light, 10);
        assert_eq!(d.take_released(), [Released { owner: 3, hpa: 128, data: 3 }]);
        assert_eq!(d.stats().overflows, 1);
    }

    proptest! {
        // Buffered view always equals last-writer-wins over the stores.
        #[test]
        fn buffer_matches_sequential_oracle(ops in prop::collection::vec((0u64..16, any::<u64>(), any::<bool>()), 1..200)) {
            let mut d = ds();
            d.on_devload(DevLoad::Severe, 0);
            let mut oracle = BTreeMap::new();
            let mut tag = 0;
            for (i, (slot, data, flush)) in ops.into_iter().enumerate() {
                let now = i as u64;
                let hpa = slot * 64;
                d.on_store(i as u64, hpa, data, now, false);
                oracle.insert(hpa, data);
                if flush {
                    d.on_probe(DevLoad::Light, now);
                    for f in d.flush_step(4) {
                        tag += 1;
                        d.track_write(tag, now, Some(f.seq));
                        // The endpoint copy gets the flushed value.
                        d.on_write_response(tag, DevLoad::Light, now);
                    }
                    d.on_devload(DevLoad::Severe, now);
                }
                prop_assert!(d.buffer().is_consistent());
                for (a, v) in d.pending_image() {
                    prop_assert_eq!(oracle.get(&a), Some(&v));
                }
            }
        }
    }
}
