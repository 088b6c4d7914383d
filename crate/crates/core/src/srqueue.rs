//! Root-port queue logic for speculative reads.
//!
//! Loads wait in the SR queue until the memory queue has room. A MemSpecRd
//! hint, sized by the DevLoad-driven granularity and the address-window
//! rule, goes out either when the load enters the SR queue or when the SR
//! reader moves it across.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{MemRequest, ReqKind};
use crate::protocol::{DevLoad, SpecReadMsg, HPA_LIMIT, MAX_SPEC_UNITS, REQUEST_BYTES, SPEC_UNIT_BYTES};

pub const QUEUE_CAPACITY: usize = 32;
pub const RING_CAPACITY: usize = 64;
pub const GRANULARITY_RUNGS: [u64; 3] = [256, 512, 1024];

/// How the port generates MemSpecRd hints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrPolicy {
    /// No hints at all.
    Off,
    /// One unit covering the load's own block, for every load, ignoring
    /// DevLoad and without dedup.
    Naive,
    /// `[block, block + g)` with DevLoad-driven granularity.
    Dynamic,
    /// Always four units forward of the block, ignoring DevLoad.
    FixedMax,
    /// Queue-aware address window with DevLoad-driven granularity.
    Windowed,
}

/// When a load's hint is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintPoint {
    /// As the load enters the SR queue. The hint then leads its demand
    /// by the SR-queue wait.
    #[default]
    Arrival,
    /// As the SR reader moves the load into the memory queue.
    Reader,
}

impl SrPolicy {
    pub fn issues_hints(self) -> bool {
        self != SrPolicy::Off
    }

    fn uses_devload(self) -> bool {
        matches!(self, SrPolicy::Dynamic | SrPolicy::Windowed)
    }

    fn dedups(self) -> bool {
        matches!(self, SrPolicy::Dynamic | SrPolicy::FixedMax | SrPolicy::Windowed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressWindow {
    pub start: u64,
    pub end: u64,
}

impl AddressWindow {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn units(&self) -> u64 {
        self.len() / SPEC_UNIT_BYTES
    }

    pub fn contains(&self, hpa: u64) -> bool {
        hpa >= self.start && hpa < self.end
    }

    pub fn to_msg(&self) -> SpecReadMsg {
        SpecReadMsg::new(self.start, self.len()).expect("finalized window is a valid MemSpecRd")
    }
}

fn block_of(addr: u64) -> u64 {
    addr / SPEC_UNIT_BYTES * SPEC_UNIT_BYTES
}

/// Nearest multiple of 256, ties toward `down` or up.
fn round_unit(v: i128, tie_down: bool) -> i128 {
    let u = SPEC_UNIT_BYTES as i128;
    let lo = v.div_euclid(u) * u;
    let rem = v - lo;
    match (2 * rem).cmp(&u) {
        core::cmp::Ordering::Less => lo,
        core::cmp::Ordering::Greater => lo + u,
        core::cmp::Ordering::Equal if tie_down => lo,
        core::cmp::Ordering::Equal => lo + u,
    }
}

/// Computes the MemSpecRd window for a load at `addr`.
///
/// Starts from `[addr - g, addr + g)`, moves the start up 64B per memory
/// queue entry and the end down 64B per SR queue entry, rounds each edge to
/// the nearest 256B boundary (ties outward), then widens to include the
/// load's block and trims to at most four units. Trimming keeps the units
/// closest to the block, alternating forward then backward.
pub fn compute_address_window(addr: u64, granularity: u64, memq_len: usize, srq_len: usize) -> AddressWindow {
    let unit = SPEC_UNIT_BYTES as i128;
    let block = block_of(addr) as i128;
    let a = addr as i128;
    let g = granularity as i128;
    let start = a - g + REQUEST_BYTES as i128 * memq_len as i128;
    let end = a + g - REQUEST_BYTES as i128 * srq_len as i128;
    if end <= start {
        return AddressWindow {
            start: block as u64,
            end: (block + unit) as u64,
        };
    }
    let mut s = round_unit(start, true).min(block);
    let mut e = round_unit(end, false).max(block + unit);
    // Address space edges.
    s = s.max(0);
    e = e.min(HPA_LIMIT as i128);

    let before = (block - s) / unit;
    let after = (e - block) / unit - 1;
    let max_extra = MAX_SPEC_UNITS as i128 - 1;
    let (keep_before, keep_after) = if before + after <= max_extra {
        (before, after)
    } else {
        // Alternate forward, backward until three extra units are chosen.
        let (mut kb, mut ka) = (0, 0);
        let mut forward = true;
        while kb + ka < max_extra {
            if forward && ka < after {
                ka += 1;
            } else if !forward && kb < before {
                kb += 1;
            } else if ka < after {
                ka += 1;
            } else {
                kb += 1;
            }
            forward = !forward;
        }
        (kb, ka)
    };
    AddressWindow {
        start: (block - keep_before * unit) as u64,
        end: (block + (keep_after + 1) * unit) as u64,
    }
}

/// Fixed-capacity record of issued hint windows.
#[derive(Debug, Clone)]
pub struct IssuedSrRing {
    slots: Vec<AddressWindow>,
    head: usize,
    capacity: usize,
}

impl IssuedSrRing {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        IssuedSrRing {
            slots: Vec::with_capacity(capacity),
            head: 0,
            capacity,
        }
    }

    pub fn record(&mut self, w: AddressWindow) {
        if self.slots.len() < self.capacity {
            self.slots.push(w);
        } else {
            self.slots[self.head] = w;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn covers(&self, hpa: u64) -> bool {
        self.slots.iter().any(|w| w.contains(hpa))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityState {
    rung: usize,
    pub halted: bool,
}

impl Default for GranularityState {
    fn default() -> Self {
        GranularityState {
            rung: 0,
            halted: false,
        }
    }
}

impl GranularityState {
    pub fn with_bytes(bytes: u64) -> Self {
        let rung = GRANULARITY_RUNGS.iter().position(|&g| g == bytes).unwrap_or(0);
        GranularityState { rung, halted: false }
    }

    pub fn current(&self) -> u64 {
        GRANULARITY_RUNGS[self.rung]
    }

    /// Applies one response's DevLoad. Returns true when this response
    /// entered the halted state.
    pub fn observe(&mut self, load: DevLoad) -> bool {
        match load {
            DevLoad::Light if self.halted => self.halted = false,
            DevLoad::Light => self.rung = (self.rung + 1).min(GRANULARITY_RUNGS.len() - 1),
            DevLoad::Optimal => {}
            DevLoad::Moderate => self.rung = self.rung.saturating_sub(1),
            DevLoad::Severe => {
                let entered = !self.halted;
                self.halted = true;
                return entered;
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrCounters {
    pub spec_issued: u64,
    pub spec_units: u64,
    pub dedup_hits: u64,
    pub halts_entered: u64,
    /// Hints issued at 256, 512 and 1024 bytes of granularity.
    pub granularity_hist: [u64; 3],
    pub reads_issued: u64,
    pub writes_issued: u64,
    pub responses: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("response tag {0} matches no outstanding request")]
    UnmatchedTag(u64),
    #[error("request kind does not match the queue")]
    WrongKind,
}

/// The caller must retry later; nothing was enqueued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stall;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admit {
    /// Held in the SR queue (or write queue) until the reader moves it,
    /// with the hint to send now if one was made on arrival.
    Queued(Option<SpecReadMsg>),
    /// Went straight to the memory queue; the caller sends it now.
    Forwarded(MemRequest),
}

/// A request the reader moved into the memory queue, preceded by its hint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReaderStep {
    pub spec: Option<SpecReadMsg>,
    pub req: MemRequest,
}

#[derive(Debug, Clone, Copy)]
struct Waiting {
    req: MemRequest,
    arrival: u64,
}

/// Per-port queue logic.
#[derive(Debug, Clone)]
pub struct QueueLogic {
    policy: SrPolicy,
    hint_point: HintPoint,
    capacity: usize,
    srq: VecDeque<Waiting>,
    writes: VecDeque<Waiting>,
    memq: BTreeMap<u64, MemRequest>,
    ring: IssuedSrRing,
    gran: GranularityState,
    arrivals: u64,
    counters: SrCounters,
}

impl QueueLogic {
    pub fn new(policy: SrPolicy) -> Self {
        Self::with_capacity(policy, QUEUE_CAPACITY, RING_CAPACITY)
    }

    pub fn with_capacity(policy: SrPolicy, capacity: usize, ring: usize) -> Self {
        QueueLogic {
            policy,
            hint_point: HintPoint::default(),
            capacity,
            srq: VecDeque::new(),
            writes: VecDeque::new(),
            memq: BTreeMap::new(),
            ring: IssuedSrRing::new(ring),
            gran: GranularityState::default(),
            arrivals: 0,
            counters: SrCounters::default(),
        }
    }

    pub fn with_hint_point(mut self, point: HintPoint) -> Self {
        self.hint_point = point;
        self
    }

    pub fn policy(&self) -> SrPolicy {
        self.policy
    }

    pub fn srq_len(&self) -> usize {
        self.srq.len()
    }

    pub fn memq_len(&self) -> usize {
        self.memq.len()
    }

    pub fn pending_writes(&self) -> usize {
        self.writes.len()
    }

    pub fn granularity(&self) -> GranularityState {
        self.gran
    }

    pub fn counters(&self) -> SrCounters {
        self.counters
    }

    pub fn ring(&self) -> &IssuedSrRing {
        &self.ring
    }

    fn memq_has_space(&self) -> bool {
        self.memq.len() < self.capacity
    }

    pub fn is_idle(&self) -> bool {
        self.srq.is_empty() && self.writes.is_empty() && self.memq.is_empty()
    }

    /// Admits a load. Loads inside an already-issued window skip hint
    /// generation and go straight to the memory queue when it has room.
    pub fn on_load(&mut self, req: MemRequest) -> Result<Admit, Stall> {
        debug_assert_eq!(req.kind, ReqKind::Load);
        let covered = self.policy.dedups() && self.ring.covers(req.hpa);
        if covered && self.memq_has_space() && self.srq.is_empty() && self.writes.is_empty() {
            self.counters.dedup_hits += 1;
            self.counters.reads_issued += 1;
            self.memq.insert(req.tag, req);
            return Ok(Admit::Forwarded(req));
        }
        if self.srq.len() >= self.capacity {
            return Err(Stall);
        }
        let spec = match self.hint_point {
            HintPoint::Arrival => self.hint_for(req.hpa, covered),
            HintPoint::Reader => None,
        };
        self.arrivals += 1;
        self.srq.push_back(Waiting {
            req,
            arrival: self.arrivals,
        });
        Ok(Admit::Queued(spec))
    }

    /// Hint for a load, if the policy and the granularity state allow one.
    fn hint_for(&mut self, addr: u64, covered: bool) -> Option<SpecReadMsg> {
        if !self.policy.issues_hints() || (self.policy.uses_devload() && self.gran.halted) {
            return None;
        }
        if covered {
            self.counters.dedup_hits += 1;
            return None;
        }
        let w = self.window_for(addr);
        if self.policy.dedups() {
            self.ring.record(w);
        }
        self.counters.spec_issued += 1;
        self.counters.spec_units += w.units();
        let rung = match self.policy {
            SrPolicy::Naive => 0,
            SrPolicy::FixedMax => GRANULARITY_RUNGS.len() - 1,
            _ => self.gran.rung,
        };
        self.counters.granularity_hist[rung] += 1;
        Some(w.to_msg())
    }

    /// Admits a store bound for the endpoint. Stores share the memory queue
    /// but never generate hints. Writes are never refused: write-backs have
    /// already left the LLC, so they wait in their own FIFO instead.
    pub fn on_store(&mut self, req: MemRequest) -> Admit {
        debug_assert_eq!(req.kind, ReqKind::Store);
        if self.memq_has_space() && self.writes.is_empty() && self.srq.is_empty() {
            self.counters.writes_issued += 1;
            self.memq.insert(req.tag, req);
            return Admit::Forwarded(req);
        }
        self.arrivals += 1;
        self.writes.push_back(Waiting {
            req,
            arrival: self.arrivals,
        });
        Admit::Queued(None)
    }

    fn window_for(&self, addr: u64) -> AddressWindow {
        let block = block_of(addr);
        let unit = SPEC_UNIT_BYTES;
        let fwd = |bytes: u64| AddressWindow {
            start: block,
            end: (block + bytes).min(HPA_LIMIT),
        };
        match self.policy {
            SrPolicy::Off => fwd(unit),
            SrPolicy::Naive => fwd(unit),
            SrPolicy::Dynamic => fwd(self.gran.current()),
            SrPolicy::FixedMax => fwd(unit * MAX_SPEC_UNITS),
            SrPolicy::Windowed => compute_address_window(addr, self.gran.current(), self.memq.len(), self.srq.len()),
        }
    }

    /// Moves the oldest waiting request into the memory queue. Writes and
    /// loads leave in arrival order.
    pub fn sr_reader_step(&mut self) -> Option<ReaderStep> {
        if !self.memq_has_space() {
            return None;
        }
        let take_write = match (self.writes.front(), self.srq.front()) {
            (Some(w), Some(l)) => w.arrival < l.arrival,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let mut spec = None;
        let req = if take_write {
            self.counters.writes_issued += 1;
            self.writes.pop_front()?.req
        } else {
            self.counters.reads_issued += 1;
            let req = self.srq.pop_front()?.req;
            if self.hint_point == HintPoint::Reader {
                let covered = self.policy.dedups() && self.ring.covers(req.hpa);
                spec = self.hint_for(req.hpa, covered);
            }
            req
        };
        self.memq.insert(req.tag, req);
        Some(ReaderStep { spec, req })
    }

    /// Retires the memory-queue entry for `tag` and feeds its DevLoad to
    /// the granularity controller.
    pub fn on_response(&mut self, tag: u64, devload: DevLoad) -> Result<MemRequest, QueueError> {
        let req = self.memq.remove(&tag).ok_or(QueueError::UnmatchedTag(tag))?;
        self.counters.responses += 1;
        if self.policy.uses_devload() && self.gran.observe(devload) {
            self.counters.halts_entered += 1;
        }
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal oracle: shift the edges one 64B step at a time, round by
    /// scanning candidate boundaries, then pick the best contiguous window
    /// around the block by distance rank.
    fn oracle(addr: u64, g: u64, memq: usize, srq: usize) -> (u64, u64) {
        let a = addr as i128;
        let mut s = a - g as i128;
        let mut e = a + g as i128;
        for _ in 0..memq {
            s += 64;
        }
        for _ in 0..srq {
            e -= 64;
        }
        let block = (a / 256) * 256;
        if e <= s {
            return (block as u64, block as u64 + 256);
        }
        let nearest = |v: i128, prefer_low: bool| {
            let mut best: Option<(i128, i128)> = None;
            let mut c = (v / 256 - 2) * 256;
            while c <= v + 512 {
                let d = (c - v).abs();
                let better = match best {
                    None => true,
                    Some((bd, bc)) => d < bd || (d == bd && (c < bc) == prefer_low),
                };
                if better {
                    best = Some((d, c));
                }
                c += 256;
            }
            best.unwrap().1
        };
        let rs = nearest(s, true).min(block).max(0);
        let re = nearest(e, false).max(block + 256).min(HPA_LIMIT as i128);
        let avail: Vec<i128> = (0..).map(|k| rs + 256 * k).take_while(|&u| u < re).collect();
        let k = avail.len().min(4);
        let rank = |u: i128| {
            let d = (u - block) / 256;
            if d >= 0 {
                (2 * d - 1).max(0)
            } else {
                -2 * d
            }
        };
        let best = avail
            .windows(k)
            .filter(|w| w.contains(&block))
            .min_by_key(|w| w.iter().map(|&u| rank(u)).sum::<i128>())
            .unwrap();
        (best[0] as u64, (best[k - 1] + 256) as u64)
    }

    #[test]
    fn worked_example() {
        let w = compute_address_window(0x10000, 512, 3, 2);
        assert_eq!((w.start, w.end), (65280, 66048));
        assert_eq!(w.units(), 3);
        assert_eq!(oracle(0x10000, 512, 3, 2), (65280, 66048));
    }

    #[test]
    fn no_shift_window_is_two_units() {
        let w = compute_address_window(0x20000, 256, 0, 0);
        assert_eq!((w.start, w.end), (0x20000 - 256, 0x20000 + 256));
    }

    #[test]
    fn full_memq_collapses_to_block() {
        let w = compute_address_window(0x20040, 256, 32, 0);
        assert_eq!((w.start, w.end), (0x20000, 0x20100));
    }

    #[test]
    fn clamp_prefers_forward_units() {
        // g=1024 with no shifts spans 8 units around the block.
        let w = compute_address_window(0x40000, 1024, 0, 0);
        assert_eq!(w.units(), 4);
        assert_eq!((w.start, w.end), (0x40000 - 256, 0x40000 + 768));
    }

    #[test]
    fn window_near_zero_stays_in_range() {
        let w = compute_address_window(0x40, 1024, 0, 0);
        assert_eq!(w.start, 0);
        assert!(w.units() <= 4 && w.contains(0x40));
    }

    #[test]
    fn granularity_rungs() {
        let mut g = GranularityState::default();
        g.observe(DevLoad::Light);
        assert_eq!(g.current(), 512);
        let mut g = GranularityState::with_bytes(1024);
        g.observe(DevLoad::Optimal);
        assert_eq!(g.current(), 1024);
        g.observe(DevLoad::Moderate);
        assert_eq!(g.current(), 512);
        assert!(g.observe(DevLoad::Severe));
        assert!(g.halted);
        g.observe(DevLoad::Light);
        assert!(!g.halted);
        assert_eq!(g.current(), 512);
    }

    #[test]
    fn reader_point_hints_at_reader_step() {
        let mut q = QueueLogic::new(SrPolicy::Dynamic).with_hint_point(HintPoint::Reader);
        assert_eq!(q.on_load(MemRequest::load(0x1040, 1, 0)), Ok(Admit::Queued(None)));
        assert_eq!(q.srq_len(), 1);
        let step = q.sr_reader_step().unwrap();
        let spec = step.spec.unwrap();
        assert_eq!((spec.start(), spec.len(), step.req.tag), (0x1000, 256, 1));
        assert_eq!((q.srq_len(), q.memq_len()), (0, 1));
    }

    #[test]
    fn arrival_point_hints_on_admission() {
        let mut q = QueueLogic::new(SrPolicy::Dynamic);
        let spec = match q.on_load(MemRequest::load(0x1040, 1, 0)) {
            Ok(Admit::Queued(Some(s))) => s,
            other => panic!("{other:?}"),
        };
        assert_eq!((spec.start(), spec.len()), (0x1000, 256));
        assert_eq!(q.sr_reader_step().unwrap().spec, None);
    }

    #[test]
    fn covered_load_is_forwarded() {
        let mut q = QueueLogic::new(SrPolicy::Windowed);
        q.on_load(MemRequest::load(0x10000, 1, 0)).unwrap();
        q.sr_reader_step().unwrap();
        let r = q.on_load(MemRequest::load(0x10040, 2, 0)).unwrap();
        assert!(matches!(r, Admit::Forwarded(m) if m.tag == 2));
        assert_eq!(q.counters().dedup_hits, 1);
    }

    #[test]
    fn halted_port_reads_without_hints() {
        let mut q = QueueLogic::new(SrPolicy::Dynamic);
        q.on_load(MemRequest::load(0, 1, 0)).unwrap();
        q.sr_reader_step().unwrap();
        q.on_response(1, DevLoad::Severe).unwrap();
        assert_eq!(q.on_load(MemRequest::load(0x8000, 2, 0)), Ok(Admit::Queued(None)));
        assert_eq!(q.sr_reader_step().unwrap().req.tag, 2);
    }

    #[test]
    fn full_queues_stall_without_drop() {
        let mut q = QueueLogic::new(SrPolicy::Off);
        for t in 0..32 {
            q.on_load(MemRequest::load(t * 64, t, 0)).unwrap();
            q.sr_reader_step().unwrap();
        }
        for t in 32..64 {
            assert_eq!(q.on_load(MemRequest::load(t * 64, t, 0)), Ok(Admit::Queued(None)));
        }
        assert_eq!(q.sr_reader_step(), None);
        assert_eq!(q.on_load(MemRequest::load(0, 64, 0)), Err(Stall));
        assert_eq!((q.srq_len(), q.memq_len()), (32, 32));
    }

    #[test]
    fn naive_hints_own_block_every_time() {
        let mut q = QueueLogic::new(SrPolicy::Naive);
        let first = q.on_load(MemRequest::load(0x2040, 1, 0)).unwrap();
        let Admit::Queued(Some(spec)) = first else { panic!("{first:?}") };
        assert_eq!((spec.start(), spec.len()), (0x2000, 256));
        // No dedup: the same block is hinted again.
        let second = q.on_load(MemRequest::load(0x2080, 2, 0)).unwrap();
        assert!(matches!(second, Admit::Queued(Some(_))));
    }

    #[test]
    fn writes_and_loads_leave_in_arrival_order() {
        let mut q = QueueLogic::new(SrPolicy::Off);
        for t in 0..32 {
            q.on_load(MemRequest::load(t * 64, t, 0)).unwrap();
            q.sr_reader_step().unwrap();
        }
        assert_eq!(q.on_store(MemRequest::store(0x40, 100, 0, 1)), Admit::Queued(None));
        q.on_load(MemRequest::load(0x40, 101, 0)).unwrap();
        q.on_response(0, DevLoad::Light).unwrap();
        assert_eq!(q.sr_reader_step().unwrap().req.tag, 100);
        q.on_response(1, DevLoad::Light).unwrap();
        assert_eq!(q.sr_reader_step().unwrap().req.tag, 101);
    }

    #[test]
    fn unmatched_response_is_an_error() {
        let mut q = QueueLogic::new(SrPolicy::Off);
        assert_eq!(q.on_response(9, DevLoad::Light), Err(QueueError::UnmatchedTag(9)));
    }

    proptest! {
        #[test]
        fn window_matches_oracle(
            addr in (0u64..1 << 40).prop_map(|a| a / 64 * 64),
            g in prop::sample::select(GRANULARITY_RUNGS.to_vec()),
            memq in 0usize..=32,
            srq in 0usize..=32,
        ) {
            let w = compute_address_window(addr, g, memq, srq);
            prop_assert_eq!((w.start, w.end), oracle(addr, g, memq, srq));
            prop_assert!(w.contains(addr));
            prop_assert!(w.start % 256 == 0 && (1..=4).contains(&w.units()));
        }

        #[test]
        fn halt_blocks_hints(loads in prop::collection::vec(0u64..1 << 20, 1..40)) {
            let mut q = QueueLogic::new(SrPolicy::Windowed);
            q.on_load(MemRequest::load(0, 0, 0)).unwrap();
            q.sr_reader_step().unwrap();
            q.on_response(0, DevLoad::Severe).unwrap();
            for (i, a) in loads.iter().enumerate() {
                let tag = i as u64 + 1;
                match q.on_load(MemRequest::load(a / 64 * 64, tag, 0)).unwrap() {
                    Admit::Forwarded(m) => {
                        q.on_response(m.tag, DevLoad::Moderate).unwrap();
                    }
                    Admit::Queued(spec) => prop_assert!(spec.is_none()),
                }
                while let Some(step) = q.sr_reader_step() {
                    prop_assert!(step.spec.is_none());
                    q.on_response(step.req.tag, DevLoad::Moderate).unwrap();
                }
            }
        }
    }
}
