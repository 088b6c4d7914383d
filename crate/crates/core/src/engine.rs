//! Discrete-event core: the GPU front end, LLC and MSHRs, root ports with
//! their links, endpoints and the fault-based baselines, all driven from one
//! ordered agenda.
//!
//! Time is integer nanoseconds. Events at equal times run in the order they
//! were scheduled.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::baselines::{AccessClass, FaultConfig, UvmState};
use crate::dstore::{DeterministicStore, StoreAction, Transition, WriteMode};
use crate::endpoint::{Endpoint, EpEvent, EpOutput};
use crate::fabric::{
    enumerate_endpoints, EndpointLayout, LlcModel, LlcOutcome, MemRequest, MemoryMap, ReqKind, Target, LINE_BYTES,
};
use crate::metrics::{
    peak_within, Comparison, ComparisonRow, DsReport, EndpointReport, LatencySummary, Manifest, MetricsReport, OpCounts,
    PortReport, Series, REPORT_SCHEMA_VERSION,
};
use crate::protocol::{FlitKind, FlitMsg, REQUEST_BYTES};
use crate::scenario::{ConfigError, Mode, ScenarioConfig};
use crate::srqueue::{Admit, QueueError, QueueLogic};
use crate::traces::{footprint_of, OpKind, TraceOp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("address {0:#x} is not mapped")]
    Unmapped(u64),
    #[error("port {port}: {source}")]
    Queue { port: usize, source: QueueError },
    #[error("conservation check failed: {0}")]
    Conservation(String),
    #[error("event scheduled at {at} while the clock reads {now}")]
    Causality { at: u64, now: u64 },
}

/// A value returned to a load, in trace-relative addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadObservation {
    pub op: usize,
    pub addr: u64,
    pub value: u64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub report: MetricsReport,
    pub series: Series,
    /// Final memory contents by trace-relative address; absent means never
    /// written.
    pub final_image: BTreeMap<u64, u64>,
    pub loads: Vec<LoadObservation>,
}

/// Payload token written by the store at trace index `op`.
pub fn store_token(op: usize) -> u64 {
    op as u64 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Frontend,
    Complete { req: u64, value: Option<u64> },
    Fill { id: u64, data: u64 },
    Ep { port: usize, ev: EpEvent },
    Resp { port: usize, msg: FlitMsgOrd },
    Probe { port: usize },
    Flush { port: usize },
}

/// `FlitMsg` wrapper with a total order so it can sit in the event enum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FlitMsgOrd(FlitMsg);

impl PartialOrd for FlitMsgOrd {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FlitMsgOrd {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.0.tag, self.0.hpa).cmp(&(other.0.tag, other.0.hpa))
    }
}

#[derive(Debug, Clone, Copy)]
struct LineReq {
    op: Option<usize>,
    parent: Option<u64>,
    kind: ReqKind,
    hpa: u64,
    data: u64,
}

#[derive(Debug, Clone)]
struct PendingFill {
    line: u64,
    waiters: Vec<u64>,
    stale: bool,
}

#[derive(Debug, Clone, Copy)]
enum Owner {
    Read { fill: u64 },
    Write { req: Option<u64> },
    Probe,
}

struct Port {
    ql: QueueLogic,
    ds: Option<DeterministicStore>,
    ep: Endpoint,
    tx: VecDeque<FlitMsg>,
    up_free: u64,
    down_free: u64,
    owners: BTreeMap<u64, Owner>,
    probe_armed: bool,
    flush_armed: bool,
}

#[derive(Debug, Clone, Copy)]
struct OpSlot {
    remaining: u32,
    issued: u64,
    kind: OpKind,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    trace: &'a [TraceOp],
    map: MemoryMap,
    data_base: u64,
    now: u64,
    seq: u64,
    agenda: BTreeMap<(u64, u64), Event>,
    // Front end.
    next_op: usize,
    line_idx: u64,
    cursor: u64,
    free_contexts: usize,
    wake_at: Option<u64>,
    ops: BTreeMap<usize, OpSlot>,
    completed_ops: u64,
    exec_end: u64,
    // Requests below the SMs.
    next_req: u64,
    reqs: BTreeMap<u64, LineReq>,
    llc: LlcModel,
    mshr: BTreeMap<u64, u64>,
    fills: BTreeMap<u64, PendingFill>,
    next_fill: u64,
    next_tag: u64,
    ports: Vec<Port>,
    uvm: Option<UvmState>,
    image: BTreeMap<u64, u64>,
    // Accounting.
    counts: OpCounts,
    load_lat: Vec<(u64, u64)>,
    store_lat: Vec<(u64, u64)>,
    loads: Vec<LoadObservation>,
    fault_violations: u64,
    resident_violations: u64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, trace: &'a [TraceOp]) -> Result<Self, SimError> {
        cfg.validate()?;
        if trace.is_empty() {
            return Err(SimError::EmptyTrace);
        }
        let footprint = footprint_of(trace).max(LINE_BYTES);
        let local = if cfg.mode == Mode::GpuDram {
            cfg.gpu.local_bytes.max(footprint.next_multiple_of(4096))
        } else {
            cfg.gpu.local_bytes
        };
        let host = cfg.host_window_bytes.max(footprint.next_multiple_of(4096));
        let layouts: Vec<EndpointLayout> = cfg
            .endpoints
            .iter()
            .map(|e| EndpointLayout {
                size: e.capacity_bytes,
                base: None,
            })
            .collect();
        let map = enumerate_endpoints(local, host, &layouts).map_err(|e| ConfigError::Map(format!("{e}")))?;
        let (data_base, available, what) = match cfg.mode {
            Mode::GpuDram => (0, local, "GPU memory"),
            Mode::Uvm | Mode::Gds => {
                let r = map.region_of(Target::PcieEpHost).expect("host window is always mapped");
                (r.base, r.size, "the host window")
            }
            _ => {
                let first = map.hdm_regions().next().expect("validated: at least one endpoint");
                let total: u64 = map.hdm_regions().map(|r| r.size).sum();
                (first.base, total, "endpoint memory")
            }
        };
        if footprint > available {
            return Err(ConfigError::Footprint {
                footprint,
                available,
                what,
            }
            .into());
        }
        let mut ports = Vec::new();
        if cfg.mode.is_cxl() {
            for ep_cfg in &cfg.endpoints {
                let ep = Endpoint::new(*ep_cfg).map_err(|source| ConfigError::Endpoint { index: ports.len(), source })?;
                let ds = (cfg.mode == Mode::CxlDs && ep_cfg.media.is_flash())
                    .then(|| DeterministicStore::new(cfg.ds_config(ep_cfg)));
                ports.push(Port {
                    ql: QueueLogic::with_capacity(cfg.policy(), cfg.queue.capacity, cfg.queue.ring)
                        .with_hint_point(cfg.queue.hint_point),
                    ds,
                    ep,
                    tx: VecDeque::new(),
                    up_free: 0,
                    down_free: 0,
                    owners: BTreeMap::new(),
                    probe_armed: false,
                    flush_armed: false,
                });
            }
        }
        let uvm = cfg.mode.is_fault_based().then(|| {
            let backing = if cfg.mode == Mode::Uvm {
                cfg.baseline.uvm_backing
            } else {
                cfg.gds_backing()
            };
            UvmState::new(FaultConfig {
                host_intervention_ns: cfg.baseline.host_intervention_ns,
                page_budget: cfg.page_budget(),
                servers: cfg.baseline.servers,
                local_ns: cfg.gpu.local_read_ns,
                backing,
            })
        });
        Ok(Sim {
            cfg,
            trace,
            map,
            data_base,
            now: 0,
            seq: 0,
            agenda: BTreeMap::new(),
            next_op: 0,
            line_idx: 0,
            cursor: 0,
            free_contexts: cfg.gpu.contexts,
            wake_at: None,
            ops: BTreeMap::new(),
            completed_ops: 0,
            exec_end: 0,
            next_req: 0,
            reqs: BTreeMap::new(),
            llc: LlcModel::new(&cfg.gpu.llc),
            mshr: BTreeMap::new(),
            fills: BTreeMap::new(),
            next_fill: 0,
            next_tag: 0,
            ports,
            uvm,
            image: BTreeMap::new(),
            counts: OpCounts {
                total: trace.len() as u64,
                ..OpCounts::default()
            },
            load_lat: Vec::new(),
            store_lat: Vec::new(),
            loads: Vec::new(),
            fault_violations: 0,
            resident_violations: 0,
        })
    }

    fn at(&mut self, t: u64, ev: Event) {
        debug_assert!(t >= self.now, "event in the past");
        self.seq += 1;
        self.agenda.insert((t.max(self.now), self.seq), ev);
    }

    fn tag(&mut self) -> u64 {
        self.next_tag += 1;
        self.next_tag
    }

    fn trace_done(&self) -> bool {
        self.completed_ops == self.counts.total
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.at(0, Event::Frontend);
        while let Some(((t, _), ev)) = self.agenda.pop_first() {
            if t < self.now {
                return Err(SimError::Causality { at: t, now: self.now });
            }
            self.now = t;
            self.step(ev)?;
        }
        self.check_conservation()
    }

    fn step(&mut self, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::Frontend => {
                if self.wake_at == Some(self.now) {
                    self.wake_at = None;
                }
            }
            Event::Complete { req, value } => self.complete(req, value),
            Event::Fill { id, data } => self.fill(id, data),
            Event::Ep { port, ev } => self.ep_event(port, ev),
            Event::Resp { port, msg } => self.port_response(port, msg.0)?,
            Event::Probe { port } => self.probe(port),
            Event::Flush { port } => self.flush(port),
        }
        self.pump_frontend()
    }

    // ---- front end ----

    fn wake(&mut self, t: u64) {
        if self.wake_at.is_none_or(|w| w > t) {
            self.wake_at = Some(t);
            self.at(t, Event::Frontend);
        }
    }

    fn route(&self, hpa: u64) -> Result<Target, SimError> {
        self.map.hdm_decode(hpa).map(|(t, _)| t).map_err(|e| SimError::Unmapped(e.0))
    }

    /// Whether a load to `hpa` can enter the memory system right now.
    fn can_admit_load(&self, hpa: u64) -> Result<bool, SimError> {
        if self.llc.contains(hpa) || self.mshr.contains_key(&hpa) {
            return Ok(true);
        }
        match self.route(hpa)? {
            Target::CxlPort(p) => {
                let port = &self.ports[p as usize];
                let buffered = port.ds.as_ref().is_some_and(|d| d.holds(hpa));
                Ok(buffered || port.ql.srq_len() < self.cfg.queue.capacity)
            }
            _ => Ok(true),
        }
    }

    fn pump_frontend(&mut self) -> Result<(), SimError> {
        while self.next_op < self.trace.len() {
            let op = self.trace[self.next_op];
            let t = self.cursor.max(op.tick).max(self.now);
            if t > self.now {
                self.wake(t);
                return Ok(());
            }
            if op.kind == OpKind::Compute {
                self.cursor = t + op.size;
                self.counts.computes += 1;
                self.completed_ops += 1;
                self.exec_end = self.exec_end.max(self.cursor);
                self.next_op += 1;
                continue;
            }
            let lines = (op.size / REQUEST_BYTES).max(1);
            if self.free_contexts == 0 {
                return Ok(());
            }
            let hpa = self.data_base + op.addr + self.line_idx * REQUEST_BYTES;
            if op.kind == OpKind::Load && !self.can_admit_load(hpa)? {
                return Ok(());
            }
            let idx = self.next_op;
            if self.line_idx == 0 {
                self.ops.insert(
                    idx,
                    OpSlot {
                        remaining: lines as u32,
                        issued: t,
                        kind: op.kind,
                    },
                );
                match op.kind {
                    OpKind::Load => self.counts.loads += 1,
                    _ => self.counts.stores += 1,
                }
            }
            self.free_contexts -= 1;
            self.cursor = t + self.cfg.gpu.issue_ns;
            self.issue_line(idx, op.kind, hpa)?;
            self.line_idx += 1;
            if self.line_idx == lines {
                self.line_idx = 0;
                self.next_op += 1;
            }
        }
        Ok(())
    }

    fn new_req(&mut self, r: LineReq) -> u64 {
        self.next_req += 1;
        self.counts.requests_issued += 1;
        self.reqs.insert(self.next_req, r);
        self.next_req
    }

    fn issue_line(&mut self, op: usize, kind: OpKind, hpa: u64) -> Result<(), SimError> {
        let hit = self.cfg.gpu.llc.hit_ns;
        match kind {
            OpKind::Load => {
                let req = self.new_req(LineReq {
                    op: Some(op),
                    parent: None,
                    kind: ReqKind::Load,
                    hpa,
                    data: 0,
                });
                if let Some(v) = self.llc.load(hpa) {
                    self.at(self.now + hit, Event::Complete { req, value: Some(v) });
                } else if let Some(&id) = self.mshr.get(&hpa) {
                    self.fills.get_mut(&id).expect("mshr entry has a fill").waiters.push(req);
                } else {
                    self.next_fill += 1;
                    let id = self.next_fill;
                    self.mshr.insert(hpa, id);
                    self.fills.insert(
                        id,
                        PendingFill {
                            line: hpa,
                            waiters: alloc::vec![req],
                            stale: false,
                        },
                    );
                    self.read_below(id, hpa)?;
                }
            }
            _ => {
                let data = store_token(op);
                let req = self.new_req(LineReq {
                    op: Some(op),
                    parent: None,
                    kind: ReqKind::Store,
                    hpa,
                    data,
                });
                // A fill still in flight for this line now carries old data.
                if let Some(id) = self.mshr.remove(&hpa) {
                    self.fills.get_mut(&id).expect("mshr entry has a fill").stale = true;
                }
                match self.llc.store(hpa, data) {
                    LlcOutcome::Miss { writeback: Some(wb) } => {
                        let w = self.new_req(LineReq {
                            op: None,
                            parent: Some(req),
                            kind: ReqKind::Store,
                            hpa: wb.hpa,
                            data: wb.data,
                        });
                        self.counts.writebacks += 1;
                        self.write_below(w)?;
                    }
                    _ => self.at(self.now + hit, Event::Complete { req, value: None }),
                }
            }
        }
        Ok(())
    }

    fn complete(&mut self, req: u64, value: Option<u64>) {
        let Some(r) = self.reqs.remove(&req) else { return };
        self.counts.requests_completed += 1;
        if let Some(parent) = r.parent {
            self.complete(parent, None);
        }
        let Some(op) = r.op else { return };
        self.free_contexts += 1;
        if let (ReqKind::Load, Some(v)) = (r.kind, value) {
            self.loads.push(LoadObservation {
                op,
                addr: r.hpa - self.data_base,
                value: v,
            });
        }
        let slot = self.ops.get_mut(&op).expect("op slot exists while lines are outstanding");
        slot.remaining -= 1;
        if slot.remaining == 0 {
            let slot = self.ops.remove(&op).expect("slot present");
            let lat = self.now - slot.issued;
            match slot.kind {
                OpKind::Load => self.load_lat.push((self.now, lat)),
                _ => self.store_lat.push((self.now, lat)),
            }
            self.completed_ops += 1;
            self.exec_end = self.exec_end.max(self.now);
        }
    }

    fn fill(&mut self, id: u64, data: u64) {
        let f = self.fills.remove(&id).expect("fill for a pending entry");
        if !f.stale {
            if self.mshr.get(&f.line) == Some(&id) {
                self.mshr.remove(&f.line);
            }
            if let Some(wb) = self.llc.fill(f.line, data) {
                let w = self.new_req(LineReq {
                    op: None,
                    parent: None,
                    kind: ReqKind::Store,
                    hpa: wb.hpa,
                    data: wb.data,
                });
                self.counts.writebacks += 1;
                // Routing was validated when the line was first written.
                let _ = self.write_below(w);
            }
        }
        for req in f.waiters {
            self.complete(req, Some(data));
        }
    }

    // ---- below the LLC ----

    fn fault_access(&mut self, hpa: u64, write: bool) -> u64 {
        let uvm = self.uvm.as_mut().expect("fault-based mode has a fault handler");
        let a = uvm.access(hpa, write, self.now);
        let lat = a.complete_at - self.now;
        let bound = self.cfg.baseline.host_intervention_ns;
        match a.class {
            AccessClass::Fault if lat < bound => self.fault_violations += 1,
            AccessClass::Resident if lat >= bound => self.resident_violations += 1,
            _ => {}
        }
        a.complete_at
    }

    fn read_below(&mut self, fill: u64, hpa: u64) -> Result<(), SimError> {
        let hit = self.cfg.gpu.llc.hit_ns;
        match self.route(hpa)? {
            Target::GpuLocal => {
                let data = self.image.get(&hpa).copied().unwrap_or(0);
                self.at(self.now + self.cfg.gpu.local_read_ns + hit, Event::Fill { id: fill, data });
            }
            Target::PcieEpHost => {
                let done = if self.uvm.is_some() {
                    self.fault_access(hpa, false)
                } else {
                    self.now + self.cfg.gpu.local_read_ns
                };
                let data = self.image.get(&hpa).copied().unwrap_or(0);
                self.at(done + hit, Event::Fill { id: fill, data });
            }
            Target::CxlPort(p) => {
                let p = p as usize;
                if let Some(v) = self.ports[p].ds.as_mut().and_then(|d| d.intercept_load(hpa)) {
                    self.at(self.now + self.cfg.gpu.local_read_ns + hit, Event::Fill { id: fill, data: v });
                    return Ok(());
                }
                let tag = self.tag();
                let now = self.now;
                let port = &mut self.ports[p];
                port.owners.insert(tag, Owner::Read { fill });
                let admit = port
                    .ql
                    .on_load(MemRequest::load(hpa, tag, now))
                    .map_err(|_| SimError::Conservation(format!("port {p} refused an admitted load")))?;
                match admit {
                    Admit::Forwarded(req) => self.ports[p].tx.push_back(Self::request_flit(&req)),
                    Admit::Queued(Some(spec)) => {
                        let htag = self.tag();
                        self.ports[p].tx.push_back(FlitMsg::mem_spec_rd(spec, htag));
                    }
                    Admit::Queued(None) => {}
                }
                self.service_port(p);
            }
        }
        Ok(())
    }

    fn request_flit(req: &MemRequest) -> FlitMsg {
        let msg = match req.kind {
            ReqKind::Load => FlitMsg::mem_rd(req.hpa, req.tag),
            ReqKind::Store => FlitMsg::mem_wr(req.hpa, req.tag, req.data),
        };
        msg.expect("requests are 64B aligned by construction")
    }

    fn write_below(&mut self, w: u64) -> Result<(), SimError> {
        let r = self.reqs[&w];
        match self.route(r.hpa)? {
            Target::GpuLocal => {
                self.image.insert(r.hpa, r.data);
                self.at(self.now + self.cfg.gpu.local_write_ns, Event::Complete { req: w, value: None });
            }
            Target::PcieEpHost => {
                let done = if self.uvm.is_some() {
                    self.fault_access(r.hpa, true)
                } else {
                    self.now + self.cfg.gpu.local_write_ns
                };
                self.image.insert(r.hpa, r.data);
                self.at(done, Event::Complete { req: w, value: None });
            }
            Target::CxlPort(p) => {
                let p = p as usize;
                if self.ports[p].ds.is_some() {
                    self.ds_store(p, w, r.hpa, r.data);
                } else {
                    self.send_write(p, r.hpa, r.data, Some(w), None);
                }
                self.service_port(p);
            }
        }
        Ok(())
    }

    /// Queues a MemWr on port `p`. `owner` completes on the response.
    fn send_write(&mut self, p: usize, hpa: u64, data: u64, owner: Option<u64>, flush: Option<Option<u64>>) {
        let tag = self.tag();
        let now = self.now;
        let port = &mut self.ports[p];
        port.owners.insert(tag, Owner::Write { req: owner });
        if let (Some(ds), Some(seq)) = (port.ds.as_mut(), flush) {
            ds.track_write(tag, now, seq);
        }
        if let Admit::Forwarded(req) = port.ql.on_store(MemRequest::store(hpa, tag, now, data)) {
            port.tx.push_back(Self::request_flit(&req));
        }
    }

    fn ds_store(&mut self, p: usize, w: u64, hpa: u64, data: u64) {
        let cap = self.cfg.queue.capacity;
        let now = self.now;
        let port = &mut self.ports[p];
        let backpressured = port.ql.memq_len() >= cap || port.ql.pending_writes() > 0;
        let ds = port.ds.as_mut().expect("DS port");
        let (action, tr) = ds.on_store(w, hpa, data, now, backpressured);
        let local = self.cfg.gpu.local_write_ns;
        match action {
            StoreAction::Dual => {
                self.send_write(p, hpa, data, None, Some(None));
                self.at(now + local, Event::Complete { req: w, value: None });
            }
            StoreAction::Buffered | StoreAction::Updated => {
                self.at(now + local, Event::Complete { req: w, value: None });
            }
            // Completes when its write-through is acknowledged.
            StoreAction::Deferred => {}
        }
        self.ds_transition(p, tr);
    }

    fn ds_transition(&mut self, p: usize, tr: Option<Transition>) {
        match tr {
            Some(Transition::Suspend) => {
                if !self.ports[p].probe_armed {
                    self.ports[p].probe_armed = true;
                    let poll = self.ports[p].ds.as_ref().map_or(0, |d| d.config().poll_interval_ns);
                    self.at(self.now + poll, Event::Probe { port: p });
                }
            }
            Some(Transition::Resume) => {
                let released = self.ports[p].ds.as_mut().map(|d| d.take_released()).unwrap_or_default();
                for r in released {
                    self.send_write(p, r.hpa, r.data, Some(r.owner), Some(None));
                }
                if !self.ports[p].flush_armed {
                    self.ports[p].flush_armed = true;
                    self.at(self.now, Event::Flush { port: p });
                }
            }
            None => {}
        }
    }

    fn probe(&mut self, p: usize) {
        self.ports[p].probe_armed = false;
        let Some(ds) = self.ports[p].ds.as_ref() else { return };
        if ds.mode() != WriteMode::Suspended || (self.trace_done() && ds.deferred_len() == 0) {
            return;
        }
        let poll = ds.config().poll_interval_ns;
        let tag = self.tag();
        let port = &mut self.ports[p];
        port.owners.insert(tag, Owner::Probe);
        port.tx.push_back(FlitMsg::probe(0, tag).expect("probe is aligned"));
        port.probe_armed = true;
        self.at(self.now + poll, Event::Probe { port: p });
        self.service_port(p);
    }

    fn flush(&mut self, p: usize) {
        self.ports[p].flush_armed = false;
        if self.trace_done() {
            return;
        }
        let port = &mut self.ports[p];
        let allowed = port.ep.credits().saturating_sub(port.tx.len());
        let Some(ds) = port.ds.as_mut() else { return };
        let items = ds.flush_step(allowed);
        let interval = ds.config().flush_interval_ns;
        for f in items {
            self.send_write(p, f.hpa, f.data, None, Some(Some(f.seq)));
        }
        let more = self.ports[p]
            .ds
            .as_ref()
            .is_some_and(|d| d.mode() == WriteMode::Dual && d.has_flush_work());
        if more {
            self.ports[p].flush_armed = true;
            self.at(self.now + interval, Event::Flush { port: p });
        }
        self.service_port(p);
    }

    // ---- ports and links ----

    fn service_port(&mut self, p: usize) {
        while let Some(step) = self.ports[p].ql.sr_reader_step() {
            if let Some(spec) = step.spec {
                let htag = self.tag();
                self.ports[p].tx.push_back(FlitMsg::mem_spec_rd(spec, htag));
            }
            self.ports[p].tx.push_back(Self::request_flit(&step.req));
        }
        self.pump_tx(p);
    }

    fn pump_tx(&mut self, p: usize) {
        let link = self.cfg.link;
        let now = self.now;
        let mut arrivals = Vec::new();
        let port = &mut self.ports[p];
        while port.ep.credits() > 0 {
            let Some(msg) = port.tx.pop_front() else { break };
            let payload = if msg.kind == FlitKind::MemWr { REQUEST_BYTES } else { 0 };
            let key = port.ep.send(msg).expect("credit checked above");
            let depart = now.max(port.up_free) + link.serialize_ns(payload);
            port.up_free = depart;
            arrivals.push((depart + link.one_way_ns(), key));
        }
        for (t, key) in arrivals {
            self.at(t, Event::Ep { port: p, ev: EpEvent::Arrive(key) });
        }
    }

    fn ep_event(&mut self, p: usize, ev: EpEvent) {
        let link = self.cfg.link;
        let now = self.now;
        let mut out = EpOutput::default();
        let port = &mut self.ports[p];
        port.ep.handle(ev, now, &mut out);
        let mut sched = Vec::new();
        for msg in out.responses {
            let payload = if msg.kind == FlitKind::RdResp { u64::from(msg.payload_len) } else { 0 };
            let depart = now.max(port.down_free) + link.serialize_ns(payload);
            port.down_free = depart;
            sched.push((depart + link.one_way_ns(), Event::Resp { port: p, msg: FlitMsgOrd(msg) }));
        }
        for (t, ev) in out.wakes {
            sched.push((t, Event::Ep { port: p, ev }));
        }
        for (t, ev) in sched {
            self.at(t, ev);
        }
        self.pump_tx(p);
    }

    fn port_response(&mut self, p: usize, msg: FlitMsg) -> Result<(), SimError> {
        let devload = msg.devload.expect("responses carry DevLoad");
        let owner = self.ports[p]
            .owners
            .remove(&msg.tag)
            .ok_or(SimError::Queue { port: p, source: QueueError::UnmatchedTag(msg.tag) })?;
        let now = self.now;
        let mut tr = None;
        match owner {
            Owner::Probe => {
                tr = self.ports[p].ds.as_mut().and_then(|d| d.on_probe(devload, now));
            }
            Owner::Read { fill } => {
                let port = &mut self.ports[p];
                port.ql
                    .on_response(msg.tag, devload)
                    .map_err(|source| SimError::Queue { port: p, source })?;
                if let Some(ds) = port.ds.as_mut() {
                    tr = ds.on_devload(devload, now);
                }
                self.at(now + self.cfg.gpu.llc.hit_ns, Event::Fill { id: fill, data: msg.data });
            }
            Owner::Write { req } => {
                let port = &mut self.ports[p];
                port.ql
                    .on_response(msg.tag, devload)
                    .map_err(|source| SimError::Queue { port: p, source })?;
                if let Some(ds) = port.ds.as_mut() {
                    tr = if ds.is_tracked(msg.tag) {
                        ds.on_write_response(msg.tag, devload, now)
                    } else {
                        ds.on_devload(devload, now)
                    };
                }
                if let Some(req) = req {
                    self.complete(req, None);
                }
            }
        }
        self.ds_transition(p, tr);
        self.service_port(p);
        Ok(())
    }

    // ---- end of run ----

    fn check_conservation(&self) -> Result<(), SimError> {
        let c = &self.counts;
        if self.completed_ops != c.total {
            return Err(SimError::Conservation(format!(
                "{} of {} ops completed",
                self.completed_ops, c.total
            )));
        }
        if !self.reqs.is_empty() || c.requests_issued != c.requests_completed {
            return Err(SimError::Conservation(format!(
                "{} requests issued, {} completed",
                c.requests_issued, c.requests_completed
            )));
        }
        if !self.fills.is_empty() || !self.mshr.is_empty() {
            return Err(SimError::Conservation("fills still pending".into()));
        }
        for (i, port) in self.ports.iter().enumerate() {
            if !port.ql.is_idle() || !port.tx.is_empty() || !port.owners.is_empty() {
                return Err(SimError::Conservation(format!("port {i} still has requests in flight")));
            }
            if port.ds.as_ref().is_some_and(|d| d.deferred_len() > 0) {
                return Err(SimError::Conservation(format!("port {i} still holds deferred stores")));
            }
        }
        Ok(())
    }

    fn final_image(&self) -> BTreeMap<u64, u64> {
        let mut img = self.image.clone();
        for port in &self.ports {
            img.extend(port.ep.image().iter().map(|(&a, &v)| (a, v)));
            if let Some(ds) = &port.ds {
                img.extend(ds.pending_image());
            }
        }
        img.extend(self.llc.dirty_lines());
        img.into_iter()
            .filter(|&(a, _)| a >= self.data_base)
            .map(|(a, v)| (a - self.data_base, v))
            .collect()
    }

    fn into_result(self) -> SimResult {
        let cfg = self.cfg;
        let mut ports = Vec::new();
        let mut endpoints = Vec::new();
        let mut series = Series {
            load_latency: self.load_lat.clone(),
            store_latency: self.store_lat.clone(),
            ..Series::default()
        };
        for (i, port) in self.ports.iter().enumerate() {
            let g = port.ql.granularity();
            ports.push(PortReport {
                index: i,
                sr: port.ql.counters(),
                final_granularity: g.current(),
                halted_at_end: g.halted,
                ds: port.ds.as_ref().map(|d| DsReport {
                    final_mode: d.mode(),
                    stats: d.stats(),
                    suspension_windows: d.suspension_windows().to_vec(),
                    buffered_at_end: d.buffer().len() as u64,
                }),
            });
            let ep = &port.ep;
            let occ = ep.occupancy_series();
            let cap = ep.capacity();
            let gcs = ep.gc().windows();
            endpoints.push(EndpointReport {
                index: i,
                media: ep.config().media,
                cache: ep.cache().stats(),
                hit_rate: ep.cache().stats().hit_rate(),
                stats: ep.stats(),
                ingress_capacity: cap as u64,
                peak_utilization: ep.stats().peak_occupancy as f64 / cap.max(1) as f64,
                peak_utilization_in_gc: peak_within(occ, &gcs, cap),
                gc_windows: gcs,
            });
            series.ingress_occupancy.push(occ.to_vec());
            if let Some(ds) = &port.ds {
                series.ds_buffer.push(ds.occupancy_series().to_vec());
            }
        }
        let report = MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            manifest: Manifest {
                name: cfg.name.clone(),
                mode: cfg.mode,
                sr_policy: cfg.policy(),
                seed: cfg.seed,
                trace_ops: self.trace.len() as u64,
                footprint_bytes: footprint_of(self.trace),
                data_base: self.data_base,
                memory_map: self.map.regions().to_vec(),
                config: cfg.clone(),
            },
            exec_time_ns: self.exec_end,
            normalized_time: (cfg.mode == Mode::GpuDram).then_some(1.0),
            ops: OpCounts {
                completed: self.completed_ops,
                ..self.counts
            },
            load_latency: LatencySummary::from_samples(self.load_lat.iter().map(|x| x.1)),
            store_latency: LatencySummary::from_samples(self.store_lat.iter().map(|x| x.1)),
            llc: self.llc.stats(),
            ports,
            endpoints,
            faults: self.uvm.as_ref().map(|u| u.stats()),
            fault_bound_violations: self.fault_violations,
            resident_bound_violations: self.resident_violations,
        };
        let final_image = self.final_image();
        SimResult {
            report,
            series,
            final_image,
            loads: self.loads,
        }
    }
}

/// Runs one scenario over a trace.
pub fn run(cfg: &ScenarioConfig, trace: &[TraceOp]) -> Result<SimResult, SimError> {
    let mut sim = Sim::new(cfg, trace)?;
    sim.run()?;
    Ok(sim.into_result())
}

/// The ideal configuration matching `cfg`'s GPU.
pub fn reference_config(cfg: &ScenarioConfig) -> ScenarioConfig {
    let mut r = cfg.clone();
    r.mode = Mode::GpuDram;
    r.sr_policy = None;
    r.name = String::from("reference");
    r
}

/// Runs `cfg` and fills in its time normalized to the GPU_DRAM reference.
pub fn run_normalized(cfg: &ScenarioConfig, trace: &[TraceOp]) -> Result<SimResult, SimError> {
    let mut res = run(cfg, trace)?;
    if cfg.mode != Mode::GpuDram {
        let reference = run(&reference_config(cfg), trace)?;
        res.report.normalized_time = Some(normalize(res.report.exec_time_ns, reference.report.exec_time_ns));
    }
    Ok(res)
}

fn normalize(t: u64, reference: u64) -> f64 {
    t as f64 / reference.max(1) as f64
}

/// Runs every labelled scenario over the same trace and tabulates them
/// against GPU_DRAM. An explicit GPU_DRAM entry is used as the reference;
/// otherwise one is derived from the first scenario.
pub fn compare(scenarios: &[(String, ScenarioConfig)], trace: &[TraceOp]) -> Result<(Comparison, Vec<SimResult>), SimError> {
    let mut results = Vec::with_capacity(scenarios.len());
    for (_, cfg) in scenarios {
        results.push(run(cfg, trace)?);
    }
    let reference = match scenarios.iter().position(|(_, c)| c.mode == Mode::GpuDram) {
        Some(i) => results[i].report.exec_time_ns,
        None => match scenarios.first() {
            Some((_, c)) => run(&reference_config(c), trace)?.report.exec_time_ns,
            None => 0,
        },
    };
    let first = results.first().map_or(1, |r| r.report.exec_time_ns);
    let mut rows = Vec::new();
    for ((label, cfg), res) in scenarios.iter().zip(results.iter_mut()) {
        let r = &mut res.report;
        let norm = normalize(r.exec_time_ns, reference);
        r.normalized_time = Some(norm);
        rows.push(ComparisonRow {
            label: label.clone(),
            mode: cfg.mode,
            exec_time_ns: r.exec_time_ns,
            normalized_time: norm,
            speedup_vs_first: first as f64 / r.exec_time_ns.max(1) as f64,
            hit_rate: r.hit_rate(),
            load_p50_ns: r.load_latency.p50_ns,
            load_p99_ns: r.load_latency.p99_ns,
            store_p50_ns: r.store_latency.p50_ns,
            store_p99_ns: r.store_latency.p99_ns,
        });
    }
    Ok((
        Comparison {
            schema_version: REPORT_SCHEMA_VERSION,
            reference_exec_time_ns: reference,
            rows,
        },
        results,
    ))
}

/// Final image expected from applying every store in program order.
pub fn sequential_image(trace: &[TraceOp]) -> BTreeMap<u64, u64> {
    let mut img = BTreeMap::new();
    for (i, op) in trace.iter().enumerate() {
        if op.kind == OpKind::Store {
            for l in 0..(op.size / REQUEST_BYTES).max(1) {
                img.insert(op.addr + l * REQUEST_BYTES, store_token(i));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::MediaKind;
    use crate::traces::{generate, Pattern, WorkloadSpec};

    fn small(pattern: Pattern, load: f64, n: u64, seed: u64) -> Vec<TraceOp> {
        generate(&WorkloadSpec::new(pattern, 0.1, load, 256 << 10, n, seed))
    }

    #[test]
    fn every_mode_conserves_and_matches_oracle() {
        let trace = small(Pattern::Rand, 0.5, 3000, 1);
        let oracle = sequential_image(&trace);
        for mode in Mode::ALL {
            let cfg = ScenarioConfig::new(mode, MediaKind::Znand);
            let res = run(&cfg, &trace).unwrap_or_else(|e| panic!("{mode}: {e}"));
            assert_eq!(res.report.ops.completed, trace.len() as u64, "{mode}");
            assert_eq!(res.final_image, oracle, "{mode}");
        }
    }

    #[test]
    fn ds_under_store_flood_admits_only_what_fits() {
        // Overflowing the buffer leaves deferred stores behind; loads to
        // other lines must still wait for SR-queue room.
        let trace = generate(&WorkloadSpec::new(Pattern::Seq, 0.1, 0.1, 16 << 20, 50_000, 7));
        let cfg = ScenarioConfig::new(Mode::CxlDs, MediaKind::Znand);
        let res = run(&cfg, &trace).unwrap();
        assert_eq!(res.final_image, sequential_image(&trace));
    }

    #[test]
    fn gpu_dram_normalizes_to_one() {
        let trace = small(Pattern::Seq, 1.0, 500, 2);
        let cfg = ScenarioConfig::new(Mode::GpuDram, MediaKind::Znand);
        let r = run_normalized(&cfg, &trace).unwrap();
        assert_eq!(r.report.normalized_time, Some(1.0));
    }

    #[test]
    fn empty_trace_is_rejected() {
        let cfg = ScenarioConfig::new(Mode::Cxl, MediaKind::Znand);
        assert!(matches!(run(&cfg, &[]), Err(SimError::EmptyTrace)));
    }
}
