//! Synthetic workloads and the text trace format.
//!
//! One op per line: `tick_ns op addr_hex size`, where `op` is `L`, `S` or
//! `C`. For `C` the size is a compute gap in ns and the address is ignored.
//! Ticks are the earliest issue time of each op and must not decrease.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::REQUEST_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Seq,
    Around,
    Rand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Load,
    Store,
    Compute,
}

impl OpKind {
    pub fn letter(self) -> char {
        match self {
            OpKind::Load => 'L',
            OpKind::Store => 'S',
            OpKind::Compute => 'C',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp {
    pub tick: u64,
    pub kind: OpKind,
    /// Offset within the workload footprint.
    pub addr: u64,
    pub size: u64,
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:#x} {}", self.tick, self.kind.letter(), self.addr, self.size)
    }
}

/// Largest `Around` step in either direction.
pub const AROUND_SPAN: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    /// Fraction of ops that are compute gaps.
    pub compute_ratio: f64,
    /// Fraction of memory ops that are loads.
    pub load_ratio: f64,
    pub footprint: u64,
    pub op_count: u64,
    pub seed: u64,
    /// Length of each compute gap.
    #[serde(default = "default_compute_ns")]
    pub compute_ns: u64,
}

fn default_compute_ns() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("ratio {0} is outside [0, 1]")]
    Ratio(&'static str),
    #[error("footprint must be at least one 64B line")]
    Footprint,
    #[error("footprint {footprint} exceeds ten times local memory ({local})")]
    TooLarge { footprint: u64, local: u64 },
    #[error("op count must be positive")]
    Empty,
    #[error("unknown workload `{0}`")]
    Unknown(String),
}

impl WorkloadSpec {
    pub fn new(pattern: Pattern, compute_ratio: f64, load_ratio: f64, footprint: u64, op_count: u64, seed: u64) -> Self {
        WorkloadSpec {
            pattern,
            compute_ratio,
            load_ratio,
            footprint,
            op_count,
            seed,
            compute_ns: default_compute_ns(),
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if !(0.0..=1.0).contains(&self.compute_ratio) {
            return Err(SpecError::Ratio("compute_ratio"));
        }
        if !(0.0..=1.0).contains(&self.load_ratio) {
            return Err(SpecError::Ratio("load_ratio"));
        }
        if self.footprint < REQUEST_BYTES {
            return Err(SpecError::Footprint);
        }
        if self.op_count == 0 {
            return Err(SpecError::Empty);
        }
        Ok(())
    }

    /// Also checks the footprint against local memory capacity.
    pub fn validate_for(&self, local_bytes: u64) -> Result<(), SpecError> {
        self.validate()?;
        if self.footprint > local_bytes.saturating_mul(10) {
            return Err(SpecError::TooLarge {
                footprint: self.footprint,
                local: local_bytes,
            });
        }
        Ok(())
    }
}

/// Deterministic op stream for one spec.
pub struct TraceGen {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    lines: u64,
    cursor: u64,
    tick: u64,
    emitted: u64,
}

impl TraceGen {
    pub fn new(spec: WorkloadSpec) -> Self {
        let lines = (spec.footprint / REQUEST_BYTES).max(1);
        TraceGen {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            lines,
            // A walk starting mid-footprint rarely touches the wrap.
            cursor: if spec.pattern == Pattern::Around { lines / 2 } else { 0 },
            tick: 0,
            emitted: 0,
            spec,
        }
    }

    fn next_addr(&mut self) -> u64 {
        let line = match self.spec.pattern {
            Pattern::Seq => {
                let l = self.cursor;
                self.cursor = (self.cursor + 1) % self.lines;
                l
            }
            Pattern::Around => {
                // Unbiased walk, so the next access is as likely below the
                // last one as above it. Wraps at the footprint edges.
                let reach = (AROUND_SPAN / REQUEST_BYTES) as i64;
                let step = self.rng.gen_range(-reach..=reach);
                self.cursor = (self.cursor as i64 + step).rem_euclid(self.lines as i64) as u64;
                self.cursor
            }
            Pattern::Rand => self.rng.gen_range(0..self.lines),
        };
        line * REQUEST_BYTES
    }
}

impl Iterator for TraceGen {
    type Item = TraceOp;

    fn next(&mut self) -> Option<TraceOp> {
        if self.emitted >= self.spec.op_count {
            return None;
        }
        self.emitted += 1;
        let tick = self.tick;
        if self.rng.gen_bool(self.spec.compute_ratio) {
            self.tick += self.spec.compute_ns;
            return Some(TraceOp {
                tick,
                kind: OpKind::Compute,
                addr: 0,
                size: self.spec.compute_ns,
            });
        }
        let kind = if self.rng.gen_bool(self.spec.load_ratio) {
            OpKind::Load
        } else {
            OpKind::Store
        };
        Some(TraceOp {
            tick,
            kind,
            addr: self.next_addr(),
            size: REQUEST_BYTES,
        })
    }
}

pub fn generate(spec: &WorkloadSpec) -> Vec<TraceOp> {
    TraceGen::new(spec.clone()).collect()
}

/// Concatenates segments, shifting ticks so they stay monotone.
pub fn concat(segments: &[WorkloadSpec]) -> Vec<TraceOp> {
    let mut out: Vec<TraceOp> = Vec::new();
    let mut base = 0;
    for s in segments {
        let mut end = base;
        for mut op in TraceGen::new(s.clone()) {
            op.tick += base;
            end = op.tick + if op.kind == OpKind::Compute { op.size } else { 0 };
            out.push(op);
        }
        base = end;
    }
    out
}

struct Named {
    name: &'static str,
    pattern: Pattern,
    compute: f64,
    load: f64,
}

const NAMED: [Named; 13] = [
    Named { name: "rsum", pattern: Pattern::Seq, compute: 0.314, load: 0.533 },
    Named { name: "stencil", pattern: Pattern::Around, compute: 0.375, load: 0.725 },
    Named { name: "sort", pattern: Pattern::Around, compute: 0.381, load: 0.987 },
    Named { name: "gemm", pattern: Pattern::Seq, compute: 0.116, load: 0.999 },
    Named { name: "vadd", pattern: Pattern::Seq, compute: 0.156, load: 0.691 },
    Named { name: "saxpy", pattern: Pattern::Seq, compute: 0.162, load: 0.692 },
    Named { name: "conv3", pattern: Pattern::Around, compute: 0.218, load: 0.786 },
    Named { name: "path", pattern: Pattern::Rand, compute: 0.270, load: 0.927 },
    Named { name: "cfd", pattern: Pattern::Rand, compute: 0.209, load: 0.426 },
    Named { name: "gauss", pattern: Pattern::Around, compute: 0.235, load: 0.485 },
    Named { name: "bfs", pattern: Pattern::Rand, compute: 0.293, load: 0.432 },
    // Composites, listed for their aggregate ratios.
    Named { name: "gnn", pattern: Pattern::Rand, compute: 0.274, load: 0.738 },
    Named { name: "mri", pattern: Pattern::Around, compute: 0.292, load: 0.533 },
];

const COMPOSITES: [(&str, &[&str]); 2] = [("gnn", &["bfs", "vadd", "gemm"]), ("mri", &["sort", "conv3"])];

pub fn workload_names() -> impl Iterator<Item = &'static str> {
    NAMED.iter().map(|n| n.name)
}

/// Segments making up a named workload. Simple workloads have one segment;
/// composites split `op_count` evenly across their parts.
pub fn named_workload(name: &str, footprint: u64, op_count: u64, seed: u64) -> Result<Vec<WorkloadSpec>, SpecError> {
    let find = |n: &str| NAMED.iter().find(|w| w.name == n);
    if let Some((_, parts)) = COMPOSITES.iter().find(|(n, _)| *n == name) {
        let per = (op_count / parts.len() as u64).max(1);
        return parts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let w = find(p).expect("composite parts are named workloads");
                Ok(WorkloadSpec::new(w.pattern, w.compute, w.load, footprint, per, seed.wrapping_add(i as u64)))
            })
            .collect();
    }
    let w = find(name).ok_or_else(|| SpecError::Unknown(name.into()))?;
    Ok(alloc::vec![WorkloadSpec::new(w.pattern, w.compute, w.load, footprint, op_count, seed)])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceErrorKind {
    #[error("expected 4 fields, found {0}")]
    FieldCount(usize),
    #[error("bad tick `{0}`")]
    Tick(String),
    #[error("unknown op `{0}`")]
    Op(String),
    #[error("bad address `{0}`")]
    Addr(String),
    #[error("bad size `{0}`")]
    Size(String),
    #[error("memory op size {0} must be a positive multiple of 64")]
    SizeAlignment(u64),
    #[error("address {0:#x} is not 64B aligned")]
    Unaligned(u64),
    #[error("tick {tick} is before previous tick {prev}")]
    NonMonotone { tick: u64, prev: u64 },
    #[error("trace is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct TraceError {
    pub line: usize,
    pub kind: TraceErrorKind,
}

fn parse_hex(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    u64::from_str_radix(digits, 16).ok()
}

/// Parses the text format. Blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>, TraceError> {
    let mut ops = Vec::new();
    let mut prev = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| TraceError { line, kind };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(TraceErrorKind::FieldCount(fields.len())));
        }
        let tick: u64 = fields[0].parse().map_err(|_| err(TraceErrorKind::Tick(fields[0].into())))?;
        let kind = match fields[1] {
            "L" => OpKind::Load,
            "S" => OpKind::Store,
            "C" => OpKind::Compute,
            other => return Err(err(TraceErrorKind::Op(other.into()))),
        };
        let addr = parse_hex(fields[2]).ok_or_else(|| err(TraceErrorKind::Addr(fields[2].into())))?;
        let size: u64 = fields[3].parse().map_err(|_| err(TraceErrorKind::Size(fields[3].into())))?;
        if kind != OpKind::Compute {
            if size == 0 || size % REQUEST_BYTES != 0 {
                return Err(err(TraceErrorKind::SizeAlignment(size)));
            }
            if addr % REQUEST_BYTES != 0 {
                return Err(err(TraceErrorKind::Unaligned(addr)));
            }
        }
        if tick < prev {
            return Err(err(TraceErrorKind::NonMonotone { tick, prev }));
        }
        prev = tick;
        ops.push(TraceOp { tick, kind, addr, size });
    }
    if ops.is_empty() {
        return Err(TraceError {
            line: 0,
            kind: TraceErrorKind::Empty,
        });
    }
    Ok(ops)
}

pub fn format_trace(ops: &[TraceOp]) -> String {
    let mut s = String::with_capacity(ops.len() * 24);
    for op in ops {
        let _ = writeln!(s, "{op}");
    }
    s
}

/// Observed compute ratio and load ratio of a trace.
pub fn measured_ratios(ops: &[TraceOp]) -> (f64, f64) {
    let compute = ops.iter().filter(|o| o.kind == OpKind::Compute).count();
    let loads = ops.iter().filter(|o| o.kind == OpKind::Load).count();
    let mem = ops.len() - compute;
    (
        compute as f64 / ops.len().max(1) as f64,
        loads as f64 / mem.max(1) as f64,
    )
}

/// Footprint touched by a trace, rounded up to whole lines.
pub fn footprint_of(ops: &[TraceOp]) -> u64 {
    ops.iter()
        .filter(|o| o.kind != OpKind::Compute)
        .map(|o| o.addr + o.size)
        .max()
        .unwrap_or(0)
}
