//! CXL endpoint: ingress queue, internal DRAM cache, backend media channels
//! and garbage collection.
//!
//! The endpoint is driven by the engine through [`Endpoint::handle`]. Every
//! call may schedule further [`EpEvent`]s and emit response flits.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{DevLoad, FlitKind, FlitMsg, REQUEST_BYTES, SPEC_UNIT_BYTES};

pub const CACHE_LINE_BYTES: u64 = SPEC_UNIT_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    DramDdr5,
    Optane,
    Znand,
    Nand,
}

impl MediaKind {
    pub const ALL: [MediaKind; 4] = [MediaKind::DramDdr5, MediaKind::Optane, MediaKind::Znand, MediaKind::Nand];

    pub fn is_flash(self) -> bool {
        self != MediaKind::DramDdr5
    }

    pub fn name(self) -> &'static str {
        match self {
            MediaKind::DramDdr5 => "dram_ddr5",
            MediaKind::Optane => "optane",
            MediaKind::Znand => "znand",
            MediaKind::Nand => "nand",
        }
    }

    /// Device-class defaults.
    pub fn default_timing(self) -> MediaTiming {
        match self {
            MediaKind::DramDdr5 => MediaTiming {
                read_ns: 46,
                write_ns: 46,
                bandwidth_mb_s: 44_800,
                channels: 16,
                erase_unit_bytes: 0,
            },
            MediaKind::Optane => MediaTiming {
                read_ns: 4_000,
                write_ns: 5_000,
                bandwidth_mb_s: 7_200,
                channels: 64,
                erase_unit_bytes: 4096,
            },
            MediaKind::Znand => MediaTiming {
                read_ns: 20_000,
                write_ns: 60_000,
                bandwidth_mb_s: 3_200,
                channels: 64,
                erase_unit_bytes: 2 << 20,
            },
            MediaKind::Nand => MediaTiming {
                read_ns: 100_000,
                write_ns: 600_000,
                bandwidth_mb_s: 7_000,
                channels: 64,
                erase_unit_bytes: 8 << 20,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaTiming {
    pub read_ns: u64,
    pub write_ns: u64,
    /// Aggregate media bandwidth.
    pub bandwidth_mb_s: u64,
    /// Independent operations the media can have in flight.
    pub channels: u32,
    /// Flash erase block size; zero for DRAM.
    pub erase_unit_bytes: u64,
}

impl MediaTiming {
    pub fn transfer_ns(&self, bytes: u64) -> u64 {
        (bytes * 1000).div_ceil(self.bandwidth_mb_s.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
    pub hit_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcConfig {
    pub duration_ns: u64,
    /// GC fires after this fraction of the flash region has been programmed.
    pub threshold: f64,
    pub region_bytes: u64,
    /// Lead time between announcing a GC through DevLoad and starting it.
    pub notice_ns: u64,
}

impl GcConfig {
    pub fn threshold_bytes(&self) -> u64 {
        ((self.region_bytes as f64) * self.threshold) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub media: MediaKind,
    pub timing: MediaTiming,
    pub capacity_bytes: u64,
    pub ingress_capacity: usize,
    pub cache: CacheConfig,
    pub prefetch_queue_lines: usize,
    pub gc: GcConfig,
}

impl EndpointConfig {
    pub fn for_media(media: MediaKind) -> Self {
        EndpointConfig {
            media,
            timing: media.default_timing(),
            capacity_bytes: 1 << 30,
            ingress_capacity: 64,
            cache: CacheConfig {
                capacity_bytes: 2 << 20,
                hit_ns: 100,
            },
            prefetch_queue_lines: 256,
            gc: GcConfig {
                duration_ns: 2_000_000,
                threshold: 0.25,
                region_bytes: 1 << 20,
                notice_ns: 200_000,
            },
        }
    }

    pub fn cache_enabled(&self) -> bool {
        self.media.is_flash() && self.cache.capacity_bytes >= CACHE_LINE_BYTES
    }

    pub fn validate(&self) -> Result<(), EndpointError> {
        let t = &self.timing;
        if t.read_ns == 0 || t.write_ns == 0 {
            return Err(EndpointError::Config("media latencies must be positive"));
        }
        if self.media.is_flash() && t.write_ns < t.read_ns {
            return Err(EndpointError::Config("flash write latency must not be below read latency"));
        }
        if t.channels == 0 || t.bandwidth_mb_s == 0 {
            return Err(EndpointError::Config("media needs at least one channel and nonzero bandwidth"));
        }
        if self.ingress_capacity == 0 {
            return Err(EndpointError::Config("ingress queue capacity must be positive"));
        }
        if self.capacity_bytes == 0 {
            return Err(EndpointError::Config("endpoint capacity must be positive"));
        }
        if self.media.is_flash() {
            if !(self.gc.threshold > 0.0 && self.gc.threshold <= 1.0) {
                return Err(EndpointError::Config("gc threshold must be in (0, 1]"));
            }
            if self.gc.threshold_bytes() < REQUEST_BYTES {
                return Err(EndpointError::Config("gc threshold is smaller than one write"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndpointError {
    #[error("invalid endpoint config: {0}")]
    Config(&'static str),
    #[error("endpoint received a {0} flit")]
    UnexpectedFlit(FlitKind),
    #[error("flit arrived with no reserved ingress slot")]
    NoCredit,
}

/// Maps occupancy and GC state to a DevLoad value.
pub fn compute_devload(occupancy: usize, capacity: usize, gc_pending: bool) -> DevLoad {
    // Integer form of the 85 / 50 / 25 percent cut points.
    let occ = occupancy as u64 * 100;
    let cap = capacity.max(1) as u64;
    if gc_pending || occ > 85 * cap {
        DevLoad::Severe
    } else if occ > 50 * cap {
        DevLoad::Moderate
    } else if occ > 25 * cap {
        DevLoad::Optimal
    } else {
        DevLoad::Light
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineState {
    Resident,
    Filling,
}

#[derive(Debug, Clone, Copy)]
struct LineEntry {
    state: LineState,
    touch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Resident,
    Filling,
    Absent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Lookups that found the line resident.
    pub hits: u64,
    /// Lookups that found their line already being filled. They need no
    /// media read of their own and count as hits.
    pub inflight: u64,
    pub misses: u64,
    pub prefetch_fills: u64,
    pub demand_fills: u64,
    pub evictions: u64,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.inflight + self.misses
    }

    pub fn demand_hits(&self) -> u64 {
        self.hits + self.inflight
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups() == 0 {
            0.0
        } else {
            self.demand_hits() as f64 / self.lookups() as f64
        }
    }
}

/// LRU cache of 256B lines. Lines being filled count toward occupancy but
/// are never chosen as victims.
#[derive(Debug, Clone)]
pub struct InternalDramCache {
    capacity_lines: usize,
    lines: BTreeMap<u64, LineEntry>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
    stats: CacheStats,
}

impl InternalDramCache {
    pub fn new(capacity_bytes: u64) -> Self {
        InternalDramCache {
            capacity_lines: (capacity_bytes / CACHE_LINE_BYTES) as usize,
            lines: BTreeMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn capacity_lines(&self) -> usize {
        self.capacity_lines
    }

    pub fn occupancy(&self) -> usize {
        self.lines.len()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn state(&self, line: u64) -> Lookup {
        match self.lines.get(&line) {
            Some(LineEntry { state: LineState::Resident, .. }) => Lookup::Resident,
            Some(LineEntry { state: LineState::Filling, .. }) => Lookup::Filling,
            None => Lookup::Absent,
        }
    }

    pub fn contains(&self, line: u64) -> bool {
        self.lines.contains_key(&line)
    }

    fn touch(&mut self, line: u64) {
        self.clock += 1;
        if let Some(e) = self.lines.get_mut(&line) {
            if e.state == LineState::Resident {
                self.lru.remove(&e.touch);
                self.lru.insert(self.clock, line);
            }
            e.touch = self.clock;
        }
    }

    /// Demand lookup.
    pub fn lookup(&mut self, line: u64) -> Lookup {
        let st = self.state(line);
        match st {
            Lookup::Resident => {
                self.stats.hits += 1;
                self.touch(line);
            }
            Lookup::Filling => {
                self.stats.inflight += 1;
                self.touch(line);
            }
            Lookup::Absent => self.stats.misses += 1,
        }
        st
    }

    /// Evicts the least recently touched resident line.
    pub fn evict(&mut self) -> Option<u64> {
        let (_, line) = self.lru.pop_first()?;
        self.lines.remove(&line);
        self.stats.evictions += 1;
        Some(line)
    }

    /// Reserves a slot for a line about to be filled. Returns `None` when
    /// the cache is full of in-flight lines.
    pub fn reserve(&mut self, line: u64) -> Option<Option<u64>> {
        if self.contains(line) {
            return Some(None);
        }
        let mut victim = None;
        if self.lines.len() >= self.capacity_lines {
            victim = Some(self.evict()?);
        }
        self.clock += 1;
        self.lines.insert(
            line,
            LineEntry {
                state: LineState::Filling,
                touch: self.clock,
            },
        );
        Some(victim)
    }

    pub fn complete_fill(&mut self, line: u64, prefetch: bool) {
        if let Some(e) = self.lines.get_mut(&line) {
            if e.state == LineState::Filling {
                e.state = LineState::Resident;
                self.lru.insert(e.touch, line);
                if prefetch {
                    self.stats.prefetch_fills += 1;
                } else {
                    self.stats.demand_fills += 1;
                }
            }
        }
    }

    /// Installs a resident line directly, evicting as needed.
    pub fn fill(&mut self, line: u64) -> Option<u64> {
        let victim = self.reserve(line).flatten();
        self.complete_fill(line, false);
        victim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcWindow {
    pub start: u64,
    pub end: u64,
}

/// Garbage-collection bookkeeping. Windows are kept in start order and
/// never overlap.
#[derive(Debug, Clone, Default)]
pub struct GcState {
    bytes_since_last: u64,
    active: Option<GcWindow>,
    queued: VecDeque<GcWindow>,
    done: Vec<GcWindow>,
}

impl GcState {
    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    /// A GC is announced (queued) or running.
    pub fn pending(&self) -> bool {
        self.active.is_some() || !self.queued.is_empty()
    }

    pub fn windows(&self) -> Vec<GcWindow> {
        let mut all = self.done.clone();
        all.extend(self.active);
        all.extend(self.queued.iter().copied());
        all
    }

    pub fn completed(&self) -> &[GcWindow] {
        &self.done
    }

    fn last_end(&self) -> u64 {
        self.queued
            .back()
            .or(self.active.as_ref())
            .or(self.done.last())
            .map_or(0, |w| w.end)
    }

    /// Accounts `bytes` of programming at `now`. When the counter crosses
    /// the threshold a GC window is scheduled after any earlier one and the
    /// counter resets.
    pub fn maybe_trigger_gc(&mut self, bytes: u64, now: u64, cfg: &GcConfig) -> Option<GcWindow> {
        self.bytes_since_last += bytes;
        if self.bytes_since_last < cfg.threshold_bytes() {
            return None;
        }
        self.bytes_since_last = 0;
        let start = (now + cfg.notice_ns).max(self.last_end());
        let w = GcWindow {
            start,
            end: start + cfg.duration_ns,
        };
        self.queued.push_back(w);
        Some(w)
    }

    fn begin(&mut self, now: u64) -> Option<GcWindow> {
        if self.active.is_some() {
            return None;
        }
        match self.queued.front() {
            Some(w) if w.start <= now => {
                let w = self.queued.pop_front()?;
                self.active = Some(w);
                Some(w)
            }
            _ => None,
        }
    }

    fn finish(&mut self, now: u64) -> bool {
        match self.active {
            Some(w) if w.end <= now => {
                self.done.push(w);
                self.active = None;
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MediaOp {
    /// Cache fill of one 256B line.
    Fill { line: u64, prefetch: bool },
    /// Uncached access answering one request directly.
    Direct { slot: u64 },
    /// Program one 64B write.
    Program { slot: u64 },
}

/// Internal endpoint events; the engine schedules them and hands them back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EpEvent {
    Arrive(FlitMsgKey),
    Respond { slot: u64 },
    PrefetchReady,
    MediaDone(MediaOp),
    GcStart,
    GcEnd,
}

/// Flits are parked in the endpoint while in transit so events stay `Ord`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FlitMsgKey(pub u64);

/// Output of one endpoint step.
#[derive(Debug, Default)]
pub struct EpOutput {
    pub wakes: Vec<(u64, EpEvent)>,
    pub responses: Vec<FlitMsg>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub reads: u64,
    pub writes: u64,
    pub probes: u64,
    pub spec_reads: u64,
    pub prefetch_lines_queued: u64,
    pub prefetch_lines_dropped: u64,
    pub prefetch_lines_redundant: u64,
    pub media_reads: u64,
    pub media_programs: u64,
    pub bytes_programmed: u64,
    pub peak_occupancy: u64,
}

#[derive(Debug, Clone, Copy)]
struct Prefetch {
    line: u64,
    hint: u64,
    /// Tag check done; the fill may start.
    ready_at: u64,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    msg: FlitMsg,
}

/// One endpoint behind one root port.
#[derive(Debug, Clone)]
pub struct Endpoint {
    cfg: EndpointConfig,
    cache_on: bool,
    // Ingress.
    in_transit: BTreeMap<u64, FlitMsg>,
    next_key: u64,
    reserved: usize,
    waiting: VecDeque<FlitMsg>,
    slots: BTreeMap<u64, Slot>,
    next_slot: u64,
    hint_slots: BTreeMap<u64, u32>,
    occupancy_series: Vec<(u64, u32)>,
    // Cache and media.
    cache: InternalDramCache,
    waiters: BTreeMap<u64, Vec<u64>>,
    demand: VecDeque<MediaOp>,
    program: VecDeque<u64>,
    prefetch: VecDeque<Prefetch>,
    prefetch_set: BTreeSet<u64>,
    prefetch_wake: Option<u64>,
    busy_channels: u32,
    gc: GcState,
    image: BTreeMap<u64, u64>,
    stats: EndpointStats,
}

impl Endpoint {
    pub fn new(cfg: EndpointConfig) -> Result<Self, EndpointError> {
        cfg.validate()?;
        Ok(Endpoint {
            cache_on: cfg.cache_enabled(),
            cache: InternalDramCache::new(if cfg.cache_enabled() { cfg.cache.capacity_bytes } else { 0 }),
            cfg,
            in_transit: BTreeMap::new(),
            next_key: 0,
            reserved: 0,
            waiting: VecDeque::new(),
            slots: BTreeMap::new(),
            next_slot: 0,
            hint_slots: BTreeMap::new(),
            occupancy_series: Vec::new(),
            waiters: BTreeMap::new(),
            demand: VecDeque::new(),
            program: VecDeque::new(),
            prefetch: VecDeque::new(),
            prefetch_set: BTreeSet::new(),
            prefetch_wake: None,
            busy_channels: 0,
            gc: GcState::default(),
            image: BTreeMap::new(),
            stats: EndpointStats::default(),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Requests accepted and not yet answered (or hints not yet started).
    pub fn occupancy(&self) -> usize {
        self.waiting.len() + self.slots.len() + self.hint_slots.len()
    }

    pub fn capacity(&self) -> usize {
        self.cfg.ingress_capacity
    }

    /// Free slots the link may still send into.
    pub fn credits(&self) -> usize {
        self.capacity().saturating_sub(self.occupancy() + self.reserved)
    }

    pub fn devload(&self) -> DevLoad {
        compute_devload(self.occupancy(), self.capacity(), self.gc.pending())
    }

    pub fn cache(&self) -> &InternalDramCache {
        &self.cache
    }

    pub fn gc(&self) -> &GcState {
        &self.gc
    }

    pub fn stats(&self) -> EndpointStats {
        self.stats
    }

    pub fn occupancy_series(&self) -> &[(u64, u32)] {
        &self.occupancy_series
    }

    pub fn image(&self) -> &BTreeMap<u64, u64> {
        &self.image
    }

    pub fn is_quiescent(&self) -> bool {
        self.occupancy() == 0 && self.reserved == 0 && self.busy_channels == 0 && self.program.is_empty()
    }

    /// Claims a credit for a flit leaving the root port; returns the key
    /// the engine passes back in [`EpEvent::Arrive`].
    pub fn send(&mut self, msg: FlitMsg) -> Result<FlitMsgKey, EndpointError> {
        if self.credits() == 0 {
            return Err(EndpointError::NoCredit);
        }
        if msg.kind.is_response() {
            return Err(EndpointError::UnexpectedFlit(msg.kind));
        }
        self.reserved += 1;
        self.next_key += 1;
        self.in_transit.insert(self.next_key, msg);
        Ok(FlitMsgKey(self.next_key))
    }

    fn record_occupancy(&mut self, now: u64) {
        let occ = self.occupancy() as u32;
        self.stats.peak_occupancy = self.stats.peak_occupancy.max(u64::from(occ));
        match self.occupancy_series.last_mut() {
            Some((t, v)) if *t == now => *v = occ,
            Some((_, v)) if *v == occ => {}
            _ => self.occupancy_series.push((now, occ)),
        }
    }

    pub fn handle(&mut self, ev: EpEvent, now: u64, out: &mut EpOutput) {
        match ev {
            EpEvent::Arrive(FlitMsgKey(k)) => {
                let msg = self.in_transit.remove(&k).expect("arrival for an unknown flit");
                self.reserved -= 1;
                self.waiting.push_back(msg);
            }
            EpEvent::Respond { slot } => {
                let s = self.slots.remove(&slot).expect("response for an unknown slot");
                let data = if s.msg.kind == FlitKind::MemRd {
                    self.image.get(&s.msg.hpa).copied().unwrap_or(0)
                } else {
                    0
                };
                out.responses.push(FlitMsg::response_to(&s.msg, self.devload(), data));
            }
            EpEvent::PrefetchReady => {
                if self.prefetch_wake == Some(now) {
                    self.prefetch_wake = None;
                }
            }
            EpEvent::MediaDone(op) => self.media_done(op, now, out),
            EpEvent::GcStart => {
                if let Some(w) = self.gc.begin(now) {
                    out.wakes.push((w.end, EpEvent::GcEnd));
                }
            }
            EpEvent::GcEnd => {
                if self.gc.finish(now) {
                    if let Some(next) = self.gc.queued.front() {
                        out.wakes.push((next.start.max(now), EpEvent::GcStart));
                    }
                }
            }
        }
        self.dispatch(now, out);
        self.kick_media(now, out);
        self.record_occupancy(now);
    }

    fn new_slot(&mut self, msg: FlitMsg) -> u64 {
        self.next_slot += 1;
        self.slots.insert(self.next_slot, Slot { msg });
        self.next_slot
    }

    fn dispatch(&mut self, now: u64, out: &mut EpOutput) {
        while let Some(msg) = self.waiting.pop_front() {
            match msg.kind {
                FlitKind::MemRd if msg.is_probe() => {
                    self.stats.probes += 1;
                    let slot = self.new_slot(msg);
                    out.wakes.push((now + self.cfg.cache.hit_ns, EpEvent::Respond { slot }));
                }
                FlitKind::MemRd => {
                    self.stats.reads += 1;
                    let slot = self.new_slot(msg);
                    if self.cache_on {
                        self.cached_read(slot, msg.hpa, now, out);
                    } else {
                        self.demand.push_back(MediaOp::Direct { slot });
                    }
                }
                FlitKind::MemWr => {
                    self.stats.writes += 1;
                    // Later reads observe the new value from here on.
                    self.image.insert(msg.hpa, msg.data);
                    let slot = self.new_slot(msg);
                    if self.cfg.media.is_flash() {
                        self.program.push_back(slot);
                    } else {
                        self.demand.push_back(MediaOp::Direct { slot });
                    }
                }
                FlitKind::MemSpecRd => {
                    self.stats.spec_reads += 1;
                    self.accept_hint(msg, now);
                }
                FlitKind::RdResp | FlitKind::WrResp => {
                    unreachable!("responses are rejected at send time")
                }
            }
        }
    }

    fn cached_read(&mut self, slot: u64, hpa: u64, now: u64, out: &mut EpOutput) {
        let line = hpa / CACHE_LINE_BYTES;
        match self.cache.lookup(line) {
            Lookup::Resident => {
                out.wakes.push((now + self.cfg.cache.hit_ns, EpEvent::Respond { slot }));
            }
            Lookup::Filling => self.waiters.entry(line).or_default().push(slot),
            Lookup::Absent => {
                if self.prefetch_set.remove(&line) {
                    // Promote: the demand read takes over the queued prefetch.
                    if let Some(pos) = self.prefetch.iter().position(|p| p.line == line) {
                        let p = self.prefetch.remove(pos).expect("position is in range");
                        self.resolve_hint(p.hint);
                    }
                }
                if self.cache.reserve(line).is_some() {
                    self.waiters.entry(line).or_default().push(slot);
                    self.demand.push_back(MediaOp::Fill { line, prefetch: false });
                } else {
                    self.demand.push_back(MediaOp::Direct { slot });
                }
            }
        }
    }

    fn accept_hint(&mut self, msg: FlitMsg, now: u64) {
        let Some(spec) = msg.spec_window() else { return };
        if !self.cache_on {
            return;
        }
        let hint = msg.tag;
        let mut queued = 0;
        for addr in spec.unit_addrs() {
            let line = addr / CACHE_LINE_BYTES;
            if self.cache.contains(line) || self.prefetch_set.contains(&line) {
                self.stats.prefetch_lines_redundant += 1;
            } else if self.prefetch.len() >= self.cfg.prefetch_queue_lines {
                self.stats.prefetch_lines_dropped += 1;
            } else {
                self.stats.prefetch_lines_queued += 1;
                self.prefetch.push_back(Prefetch {
                    line,
                    hint,
                    ready_at: now + self.cfg.cache.hit_ns,
                });
                self.prefetch_set.insert(line);
                queued += 1;
            }
        }
        if queued > 0 {
            *self.hint_slots.entry(hint).or_default() += queued;
        }
    }

    fn resolve_hint(&mut self, hint: u64) {
        if let Some(n) = self.hint_slots.get_mut(&hint) {
            *n -= 1;
            if *n == 0 {
                self.hint_slots.remove(&hint);
            }
        }
    }

    fn kick_media(&mut self, now: u64, out: &mut EpOutput) {
        let t = self.cfg.timing;
        while self.busy_channels < t.channels {
            let op = if let Some(op) = self.demand.pop_front() {
                op
            } else if let (false, Some(slot)) = (self.gc.is_active(), self.program.front().copied()) {
                self.program.pop_front();
                MediaOp::Program { slot }
            } else if let Some(p) = self.prefetch.front().copied() {
                if p.ready_at > now {
                    if self.prefetch_wake.is_none_or(|w| w > p.ready_at) {
                        self.prefetch_wake = Some(p.ready_at);
                        out.wakes.push((p.ready_at, EpEvent::PrefetchReady));
                    }
                    break;
                }
                self.prefetch.pop_front();
                self.prefetch_set.remove(&p.line);
                self.resolve_hint(p.hint);
                if self.cache.contains(p.line) || self.cache.reserve(p.line).is_none() {
                    continue;
                }
                MediaOp::Fill { line: p.line, prefetch: true }
            } else {
                break;
            };
            let dur = match op {
                MediaOp::Fill { .. } => {
                    self.stats.media_reads += 1;
                    t.read_ns + t.transfer_ns(CACHE_LINE_BYTES)
                }
                MediaOp::Direct { slot } => {
                    let kind = self.slots[&slot].msg.kind;
                    if kind == FlitKind::MemWr {
                        t.write_ns + t.transfer_ns(REQUEST_BYTES)
                    } else {
                        self.stats.media_reads += 1;
                        t.read_ns + t.transfer_ns(REQUEST_BYTES)
                    }
                }
                MediaOp::Program { .. } => {
                    self.stats.media_programs += 1;
                    t.write_ns + t.transfer_ns(REQUEST_BYTES)
                }
            };
            self.busy_channels += 1;
            out.wakes.push((now + dur, EpEvent::MediaDone(op)));
        }
    }

    fn media_done(&mut self, op: MediaOp, now: u64, out: &mut EpOutput) {
        self.busy_channels -= 1;
        match op {
            MediaOp::Fill { line, prefetch } => {
                self.cache.complete_fill(line, prefetch);
                let hit = self.cfg.cache.hit_ns;
                for slot in self.waiters.remove(&line).unwrap_or_default() {
                    out.wakes.push((now + hit, EpEvent::Respond { slot }));
                }
            }
            MediaOp::Direct { slot } => {
                out.wakes.push((now, EpEvent::Respond { slot }));
            }
            MediaOp::Program { slot } => {
                self.stats.bytes_programmed += REQUEST_BYTES;
                out.wakes.push((now, EpEvent::Respond { slot }));
                if let Some(w) = self.gc.maybe_trigger_gc(REQUEST_BYTES, now, &self.cfg.gc) {
                    if !self.gc.is_active() && self.gc.queued.len() == 1 {
                        out.wakes.push((w.start, EpEvent::GcStart));
                    }
                }
            }
        }
    }

    /// Convenience for tests and single-endpoint tools: processes `msg`
    /// arriving at `now` and runs the endpoint until it is quiescent.
    /// Returns each response with its departure time.
    pub fn ep_handle(&mut self, msg: FlitMsg, now: u64) -> Result<Vec<(u64, FlitMsg)>, EndpointError> {
        let key = self.send(msg)?;
        let mut agenda: BTreeMap<(u64, u64), EpEvent> = BTreeMap::new();
        let mut seq = 0u64;
        agenda.insert((now, seq), EpEvent::Arrive(key));
        let mut responses = Vec::new();
        while let Some(((t, _), ev)) = agenda.pop_first() {
            let mut out = EpOutput::default();
            self.handle(ev, t, &mut out);
            responses.extend(out.responses.into_iter().map(|r| (t, r)));
            for (at, ev) in out.wakes {
                seq += 1;
                agenda.insert((at.max(t), seq), ev);
            }
        }
        Ok(responses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::SpecReadMsg;

    fn znand() -> Endpoint {
        Endpoint::new(EndpointConfig::for_media(MediaKind::Znand)).unwrap()
    }

    #[test]
    fn devload_thresholds() {
        assert_eq!(compute_devload(0, 100, false), DevLoad::Light);
        assert_eq!(compute_devload(60, 100, false), DevLoad::Moderate);
        assert_eq!(compute_devload(10, 100, true), DevLoad::Severe);
        assert_eq!(compute_devload(30, 100, false), DevLoad::Optimal);
        assert_eq!(compute_devload(86, 100, false), DevLoad::Severe);
        let mut prev = DevLoad::Light;
        for occ in 0..=64 {
            let d = compute_devload(occ, 64, false);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn lru_victim_follows_touch_order() {
        let mut c = InternalDramCache::new(4 * CACHE_LINE_BYTES);
        assert_eq!(c.lookup(0), Lookup::Absent);
        for l in 0..4 {
            assert_eq!(c.fill(l), None);
        }
        c.lookup(0);
        assert_eq!(c.fill(4), Some(1));
        assert!(c.occupancy() <= c.capacity_lines());
        let s = c.stats();
        assert_eq!(s.hits + s.misses, 2);
    }

    #[test]
    fn prefetched_line_serves_read_from_cache() {
        let mut ep = znand();
        let hint = FlitMsg::mem_spec_rd(SpecReadMsg::new(0x1000, 1024).unwrap(), 1);
        assert!(ep.ep_handle(hint, 0).unwrap().is_empty());
        assert_eq!(ep.cache().occupancy(), 4);
        assert_eq!(ep.cache().stats().prefetch_fills, 4);
        let reads_before = ep.stats().media_reads;
        let t0 = 1_000_000;
        let resp = ep.ep_handle(FlitMsg::mem_rd(0x1240, 2).unwrap(), t0).unwrap();
        assert_eq!(resp.len(), 1);
        assert_eq!(resp[0].0, t0 + ep.config().cache.hit_ns);
        assert_eq!(ep.stats().media_reads, reads_before);
        assert_eq!(ep.cache().stats().hits, 1);
    }

    #[test]
    fn dram_endpoint_always_uses_media() {
        let mut ep = Endpoint::new(EndpointConfig::for_media(MediaKind::DramDdr5)).unwrap();
        let t = ep.config().timing;
        for i in 0..3 {
            let resp = ep.ep_handle(FlitMsg::mem_rd(0x40, i).unwrap(), i * 1000).unwrap();
            assert_eq!(resp[0].0, i * 1000 + t.read_ns + t.transfer_ns(64));
        }
        assert_eq!(ep.cache().stats().lookups(), 0);
    }

    #[test]
    fn write_during_gc_waits_for_gc_end() {
        let mut cfg = EndpointConfig::for_media(MediaKind::Znand);
        cfg.gc.region_bytes = 256;
        cfg.gc.threshold = 0.25;
        cfg.gc.notice_ns = 0;
        let mut ep = Endpoint::new(cfg).unwrap();
        // First write programs and triggers a GC on completion.
        let r = ep.ep_handle(FlitMsg::mem_wr(0, 1, 7).unwrap(), 0).unwrap();
        let first_done = r[0].0;
        let gcs = ep.gc().windows();
        assert_eq!(gcs.len(), 1);
        assert_eq!(gcs[0].start, first_done);
        // ep_handle drained the GC, so replay the 3-event schedule by hand.
        let mut ep = Endpoint::new(cfg).unwrap();
        let mut out = EpOutput::default();
        let k = ep.send(FlitMsg::mem_wr(0, 1, 7).unwrap()).unwrap();
        ep.handle(EpEvent::Arrive(k), 0, &mut out);
        let (t_done, done) = out.wakes.pop().unwrap();
        let mut out = EpOutput::default();
        ep.handle(done, t_done, &mut out);
        let gc_start = out.wakes.iter().find(|w| w.1 == EpEvent::GcStart).unwrap().0;
        let mut out = EpOutput::default();
        ep.handle(EpEvent::GcStart, gc_start, &mut out);
        assert!(ep.gc().is_active());
        let gc_end = out.wakes[0].0;
        let k = ep.send(FlitMsg::mem_wr(64, 2, 8).unwrap()).unwrap();
        let mut out = EpOutput::default();
        ep.handle(EpEvent::Arrive(k), gc_start + 10, &mut out);
        assert!(out.wakes.iter().all(|w| !matches!(w.1, EpEvent::MediaDone(_))));
        let mut out = EpOutput::default();
        ep.handle(EpEvent::GcEnd, gc_end, &mut out);
        let done = out.wakes.iter().find(|w| matches!(w.1, EpEvent::MediaDone(_))).unwrap();
        let t = cfg.timing;
        assert_eq!(done.0, gc_end + t.write_ns + t.transfer_ns(64));
    }

    #[test]
    fn gc_trigger_rules() {
        let cfg = GcConfig {
            duration_ns: 100,
            threshold: 0.5,
            region_bytes: 256,
            notice_ns: 0,
        };
        let mut gc = GcState::default();
        assert_eq!(gc.maybe_trigger_gc(64, 0, &cfg), None);
        assert_eq!(
            gc.maybe_trigger_gc(64, 10, &cfg),
            Some(GcWindow { start: 10, end: 110 })
        );
        gc.maybe_trigger_gc(64, 20, &cfg);
        // Second crossing inside the first window queues after it.
        assert_eq!(
            gc.maybe_trigger_gc(64, 30, &cfg),
            Some(GcWindow { start: 110, end: 210 })
        );
    }

    #[test]
    fn gc_announcement_reports_severe() {
        let mut cfg = EndpointConfig::for_media(MediaKind::Znand);
        cfg.gc.region_bytes = 256;
        cfg.gc.notice_ns = 1_000_000;
        let mut ep = Endpoint::new(cfg).unwrap();
        let k = ep.send(FlitMsg::mem_wr(0, 1, 1).unwrap()).unwrap();
        let mut out = EpOutput::default();
        ep.handle(EpEvent::Arrive(k), 0, &mut out);
        let (t, ev) = out.wakes.pop().unwrap();
        ep.handle(ev, t, &mut EpOutput::default());
        assert!(ep.gc().pending() && !ep.gc().is_active());
        assert_eq!(ep.devload(), DevLoad::Severe);
    }

    #[test]
    fn ingress_credits_and_probe() {
        let mut ep = znand();
        let cap = ep.capacity();
        let mut keys = Vec::new();
        for i in 0..cap as u64 {
            keys.push(ep.send(FlitMsg::mem_rd(i * 4096, i).unwrap()).unwrap());
        }
        assert_eq!(ep.credits(), 0);
        assert_eq!(ep.send(FlitMsg::mem_rd(0, 99).unwrap()), Err(EndpointError::NoCredit));
        let mut ep = znand();
        let r = ep.ep_handle(FlitMsg::probe(0, 5).unwrap(), 0).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].1.devload, Some(DevLoad::Light));
        assert_eq!(ep.stats().media_reads, 0);
    }
}
