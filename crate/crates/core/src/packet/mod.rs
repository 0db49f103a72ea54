//! Packets, per-switch metadata, and the header codec layer.

pub mod custom;
pub mod stack;

use crate::sim::SimTime;
use std::fmt;

pub use custom::{decode_custom, encode_custom, CustomHeaderDef, DefSet, FieldDef, HeaderLayer, InsertOp};
pub use stack::{
    build, deparse, insert_custom, insert_custom_view, parse_stack, standard_field_bits,
    strip_custom, strip_custom_view, Header, HeaderKind, PacketView, ParsedStack,
};

/// How a packet instance came to exist inside a switch.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum InstanceType {
    Normal,
    Resubmit,
    Recirculate,
    Clone,
}

impl InstanceType {
    pub fn label(self) -> &'static str {
        match self {
            InstanceType::Normal => "NORMAL",
            InstanceType::Resubmit => "RESUBMIT",
            InstanceType::Recirculate => "RECIRCULATE",
            InstanceType::Clone => "CLONE",
        }
    }

    pub fn as_u64(self) -> u64 {
        match self {
            InstanceType::Normal => 0,
            InstanceType::Resubmit => 1,
            InstanceType::Recirculate => 2,
            InstanceType::Clone => 3,
        }
    }
}

/// Per-switch packet metadata. Reset on every switch arrival; the timestamp
/// fields mirror the v1model intrinsic metadata of the same names.
#[derive(Clone, Debug)]
pub struct PacketMeta {
    pub ingress_port: u32,
    pub egress_port: Option<u32>,
    pub instance_type: InstanceType,
    /// Virtual queue id 0..7; 0 is the highest service priority.
    pub priority: u8,
    pub ingress_global_timestamp: SimTime,
    pub enq_timestamp: SimTime,
    pub deq_timedelta: SimTime,
    pub egress_global_timestamp: SimTime,
}

impl PacketMeta {
    pub fn on_arrival(port: u32, now: SimTime) -> PacketMeta {
        PacketMeta {
            ingress_port: port,
            egress_port: None,
            instance_type: InstanceType::Normal,
            priority: 0,
            ingress_global_timestamp: now,
            enq_timestamp: SimTime::ZERO,
            deq_timedelta: SimTime::ZERO,
            egress_global_timestamp: SimTime::ZERO,
        }
    }
}

impl Default for PacketMeta {
    fn default() -> Self {
        PacketMeta::on_arrival(0, SimTime::ZERO)
    }
}

/// A packet on the wire: raw bytes plus the metadata of the switch that
/// handled it last. `id` is unique for the whole run; internal re-injections
/// keep it, clones get a fresh one.
#[derive(Clone, Debug)]
pub struct Packet {
    pub id: u64,
    pub bytes: Vec<u8>,
    pub meta: PacketMeta,
}

impl Packet {
    pub fn new(id: u64, bytes: Vec<u8>) -> Packet {
        Packet {
            id,
            bytes,
            meta: PacketMeta::default(),
        }
    }
}

/// Run-wide packet id source; hosts and switch clone logic share one.
#[derive(Debug, Default)]
pub struct IdGen(u64);

impl IdGen {
    pub fn new() -> IdGen {
        IdGen(0)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u64 {
        let id = self.0;
        self.0 += 1;
        id
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("field {0}: value does not fit declared width")]
    ValueTooWide(String),
    #[error("field {0}: no value and no default")]
    MissingValue(String),
    #[error("truncated {0} header")]
    Truncated(&'static str),
    #[error("header {0} not present")]
    MissingHeader(String),
    #[error("layer has no header to anchor on: {0}")]
    MissingLayer(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("chain value {value:#x} does not fit {field}")]
    ChainOverflow { field: String, value: u64 },
    #[error("invalid header definition: {0}")]
    BadDef(String),
}

pub fn parse_mac(s: &str) -> Result<u64, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 6 {
        return Err(format!("bad MAC address {s:?}"));
    }
    let mut v: u64 = 0;
    for p in parts {
        let b = u8::from_str_radix(p, 16).map_err(|_| format!("bad MAC address {s:?}"))?;
        v = (v << 8) | b as u64;
    }
    Ok(v)
}

pub fn format_mac(v: u64) -> String {
    let b: Vec<String> = (0..6)
        .rev()
        .map(|i| format!("{:02x}", (v >> (i * 8)) & 0xff))
        .collect();
    b.join(":")
}

pub fn parse_ipv4(s: &str) -> Result<u64, String> {
    let addr: std::net::Ipv4Addr = s.parse().map_err(|_| format!("bad IPv4 address {s:?}"))?;
    Ok(u32::from(addr) as u64)
}

pub fn format_ipv4(v: u64) -> String {
    std::net::Ipv4Addr::from(v as u32).to_string()
}

impl fmt::Display for InstanceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_roundtrip() {
        let v = parse_mac("00:00:00:00:01:02").unwrap();
        assert_eq!(v, 0x0000_0000_0102);
        assert_eq!(format_mac(v), "00:00:00:00:01:02");
        assert!(parse_mac("00:00:00:01:02").is_err());
    }

    #[test]
    fn ipv4_roundtrip() {
        let v = parse_ipv4("10.0.2.2").unwrap();
        assert_eq!(v, 0x0a000202);
        assert_eq!(format_ipv4(v), "10.0.2.2");
        assert!(parse_ipv4("10.0.2").is_err());
    }
}
