//! CXL.mem-style message model.
//!
//! Only the fields the scheduler cares about are modeled. The one bit-exact
//! wire contract is the `MemSpecRd` address word: the two least significant
//! bits carry `units - 1`, the remaining bits carry the 256B offset.

use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Granularity of ordinary CXL.mem reads and writes.
pub const REQUEST_BYTES: u64 = 64;
/// Offset unit of a speculative read window.
pub const SPEC_UNIT_BYTES: u64 = 256;
/// Largest speculative read, in 256B units.
pub const MAX_SPEC_UNITS: u64 = 4;
/// Width of a host physical address on the CXL.mem channel.
pub const HPA_BITS: u32 = 52;
pub const HPA_LIMIT: u64 = 1 << HPA_BITS;

const COUNT_MASK: u64 = 0b11;
const OFFSET_MASK: u64 = (HPA_LIMIT / SPEC_UNIT_BYTES) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("address {0:#x} is not aligned to {1} bytes")]
    Misaligned(u64, u64),
    #[error("speculative read length {0} is not one of 256/512/768/1024")]
    BadSpecLength(u64),
    #[error("window start {0:#x} (+{1}) lies outside the {HPA_BITS}-bit address space")]
    OutOfRange(u64, u64),
    #[error("{kind} message carries payload length {len}")]
    BadPayload { kind: FlitKind, len: u32 },
    #[error("{0} message must not carry a DevLoad field")]
    UnexpectedDevLoad(FlitKind),
    #[error("{0} response is missing its DevLoad field")]
    MissingDevLoad(FlitKind),
}

/// Endpoint load telemetry carried on every response.
///
/// Numeric values follow increasing severity and fit in two bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevLoad {
    /// `ll`
    Light = 0,
    /// `ol`
    Optimal = 1,
    /// `mo`
    Moderate = 2,
    /// `so`
    Severe = 3,
}

impl DevLoad {
    pub const ALL: [DevLoad; 4] = [
        DevLoad::Light,
        DevLoad::Optimal,
        DevLoad::Moderate,
        DevLoad::Severe,
    ];

    pub fn encode(self) -> u8 {
        self as u8
    }

    /// Decodes the low two bits; higher bits are ignored.
    pub fn decode(bits: u8) -> DevLoad {
        match bits & 0b11 {
            0 => DevLoad::Light,
            1 => DevLoad::Optimal,
            2 => DevLoad::Moderate,
            _ => DevLoad::Severe,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DevLoad::Light => "ll",
            DevLoad::Optimal => "ol",
            DevLoad::Moderate => "mo",
            DevLoad::Severe => "so",
        }
    }
}

impl fmt::Display for DevLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

pub fn encode_devload(state: DevLoad) -> u8 {
    state.encode()
}

pub fn decode_devload(bits: u8) -> DevLoad {
    DevLoad::decode(bits)
}

/// A decoded `MemSpecRd` window: 1 to 4 consecutive 256B units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpecReadMsg {
    offset_units: u64,
    count_units: u8,
}

impl SpecReadMsg {
    pub fn new(window_start: u64, window_len: u64) -> Result<Self, ProtocolError> {
        if window_start % SPEC_UNIT_BYTES != 0 {
            return Err(ProtocolError::Misaligned(window_start, SPEC_UNIT_BYTES));
        }
        if window_len == 0
            || window_len % SPEC_UNIT_BYTES != 0
            || window_len / SPEC_UNIT_BYTES > MAX_SPEC_UNITS
        {
            return Err(ProtocolError::BadSpecLength(window_len));
        }
        if window_start >= HPA_LIMIT {
            return Err(ProtocolError::OutOfRange(window_start, window_len));
        }
        Ok(SpecReadMsg {
            offset_units: window_start / SPEC_UNIT_BYTES,
            count_units: (window_len / SPEC_UNIT_BYTES) as u8,
        })
    }

    /// Total over every 64-bit word. Offset bits above the HPA width are
    /// reserved and ignored.
    pub fn from_wire(word: u64) -> Self {
        SpecReadMsg {
            offset_units: (word >> 2) & OFFSET_MASK,
            count_units: (word & COUNT_MASK) as u8 + 1,
        }
    }

    pub fn to_wire(self) -> u64 {
        (self.offset_units << 2) | (u64::from(self.count_units) - 1)
    }

    pub fn start(self) -> u64 {
        self.offset_units * SPEC_UNIT_BYTES
    }

    pub fn len(self) -> u64 {
        u64::from(self.count_units) * SPEC_UNIT_BYTES
    }

    pub fn end(self) -> u64 {
        self.start() + self.len()
    }

    pub fn units(self) -> u8 {
        self.count_units
    }

    /// The 256B unit base addresses covered by this window.
    pub fn unit_addrs(self) -> impl Iterator<Item = u64> {
        let start = self.start();
        (0..u64::from(self.count_units)).map(move |i| start + i * SPEC_UNIT_BYTES)
    }

    pub fn contains(self, hpa: u64) -> bool {
        hpa >= self.start() && hpa < self.end()
    }
}

pub fn encode_specrd(window_start: u64, window_len: u64) -> Result<u64, ProtocolError> {
    SpecReadMsg::new(window_start, window_len).map(SpecReadMsg::to_wire)
}

pub fn decode_specrd(word: u64) -> (u64, u64) {
    let msg = SpecReadMsg::from_wire(word);
    (msg.start(), msg.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlitKind {
    MemRd,
    MemWr,
    MemSpecRd,
    RdResp,
    WrResp,
}

impl FlitKind {
    pub fn is_response(self) -> bool {
        matches!(self, FlitKind::RdResp | FlitKind::WrResp)
    }
}

impl fmt::Display for FlitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FlitKind::MemRd => "MemRd",
            FlitKind::MemWr => "MemWr",
            FlitKind::MemSpecRd => "MemSpecRd",
            FlitKind::RdResp => "RdResp",
            FlitKind::WrResp => "WrResp",
        };
        f.write_str(s)
    }
}

/// One link-layer message.
///
/// `data` is the functional payload token of a 64B line; the simulator
/// tracks values, not bytes. A `MemRd` with zero payload length is a DevLoad
/// probe: it is answered without touching the cache or media.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlitMsg {
    pub kind: FlitKind,
    pub hpa: u64,
    pub payload_len: u32,
    pub devload: Option<DevLoad>,
    pub tag: u64,
    pub data: u64,
}

impl FlitMsg {
    pub fn mem_rd(hpa: u64, tag: u64) -> Result<Self, ProtocolError> {
        Self::checked(FlitMsg {
            kind: FlitKind::MemRd,
            hpa,
            payload_len: REQUEST_BYTES as u32,
            devload: None,
            tag,
            data: 0,
        })
    }

    pub fn probe(hpa: u64, tag: u64) -> Result<Self, ProtocolError> {
        Self::checked(FlitMsg {
            kind: FlitKind::MemRd,
            hpa,
            payload_len: 0,
            devload: None,
            tag,
            data: 0,
        })
    }

    pub fn mem_wr(hpa: u64, tag: u64, data: u64) -> Result<Self, ProtocolError> {
        Self::checked(FlitMsg {
            kind: FlitKind::MemWr,
            hpa,
            payload_len: REQUEST_BYTES as u32,
            devload: None,
            tag,
            data,
        })
    }

    pub fn mem_spec_rd(spec: SpecReadMsg, tag: u64) -> Self {
        FlitMsg {
            kind: FlitKind::MemSpecRd,
            hpa: spec.start(),
            payload_len: spec.len() as u32,
            devload: None,
            tag,
            data: spec.to_wire(),
        }
    }

    /// Builds the response to `req`.
    pub fn response_to(req: &FlitMsg, devload: DevLoad, data: u64) -> Self {
        let kind = match req.kind {
            FlitKind::MemWr => FlitKind::WrResp,
            _ => FlitKind::RdResp,
        };
        FlitMsg {
            kind,
            hpa: req.hpa,
            payload_len: if kind == FlitKind::RdResp { req.payload_len } else { 0 },
            devload: Some(devload),
            tag: req.tag,
            data,
        }
    }

    pub fn is_probe(&self) -> bool {
        self.kind == FlitKind::MemRd && self.payload_len == 0
    }

    /// Decoded window of a `MemSpecRd`.
    pub fn spec_window(&self) -> Option<SpecReadMsg> {
        (self.kind == FlitKind::MemSpecRd).then(|| SpecReadMsg::from_wire(self.data))
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self.kind {
            FlitKind::MemRd | FlitKind::MemWr => {
                if self.hpa % REQUEST_BYTES != 0 {
                    return Err(ProtocolError::Misaligned(self.hpa, REQUEST_BYTES));
                }
                let probe_ok = self.kind == FlitKind::MemRd && self.payload_len == 0;
                if u64::from(self.payload_len) != REQUEST_BYTES && !probe_ok {
                    return Err(ProtocolError::BadPayload {
                        kind: self.kind,
                        len: self.payload_len,
                    });
                }
            }
            FlitKind::MemSpecRd => {
                if self.hpa % SPEC_UNIT_BYTES != 0 {
                    return Err(ProtocolError::Misaligned(self.hpa, SPEC_UNIT_BYTES));
                }
                let len = u64::from(self.payload_len);
                if !(1..=MAX_SPEC_UNITS).any(|u| u * SPEC_UNIT_BYTES == len) {
                    return Err(ProtocolError::BadSpecLength(len));
                }
            }
            FlitKind::RdResp | FlitKind::WrResp => {}
        }
        match (self.kind.is_response(), self.devload) {
            (true, None) => Err(ProtocolError::MissingDevLoad(self.kind)),
            (false, Some(_)) => Err(ProtocolError::UnexpectedDevLoad(self.kind)),
            _ => Ok(()),
        }
    }

    fn checked(msg: FlitMsg) -> Result<Self, ProtocolError> {
        msg.validate().map(|()| msg)
    }
}
