//! Standard header codecs and the chained stack parser.
//!
//! Every frame starts with Ethernet II (no FCS). IPv4 is the fixed 20-byte
//! form. TCP is a minimal model: the two ports are interpreted, the remaining
//! 16 header bytes ride along opaquely. Parsing walks the protocol chain and
//! stops at the first identifier it cannot resolve; whatever follows is
//! payload, never an error.

use super::custom::{
    decode_custom, encode_custom, fits, CustomHeaderDef, DefSet, HeaderLayer, InsertOp,
    ETHERTYPE_IPV4, IPPROTO_TCP, IPPROTO_UDP,
};
use super::CodecError;
use std::collections::BTreeMap;

pub const ETH_LEN: usize = 14;
pub const IPV4_LEN: usize = 20;
pub const UDP_LEN: usize = 8;
pub const TCP_LEN: usize = 20;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum HeaderKind {
    Ethernet,
    Ipv4,
    Udp,
    Tcp,
    Custom(String),
}

impl HeaderKind {
    /// Name used in field references like `ipv4.dst_addr`.
    pub fn name(&self) -> &str {
        match self {
            HeaderKind::Ethernet => "ethernet",
            HeaderKind::Ipv4 => "ipv4",
            HeaderKind::Udp => "udp",
            HeaderKind::Tcp => "tcp",
            HeaderKind::Custom(n) => n,
        }
    }

    fn layer(&self, defs: &DefSet) -> HeaderLayer {
        match self {
            HeaderKind::Ethernet => HeaderLayer::L2,
            HeaderKind::Ipv4 => HeaderLayer::L3,
            HeaderKind::Udp | HeaderKind::Tcp => HeaderLayer::L4,
            HeaderKind::Custom(n) => defs.get(n).map(|d| d.layer).unwrap_or(HeaderLayer::L3),
        }
    }
}

/// One parsed header: named fields plus (for TCP) the opaque tail bytes.
#[derive(Clone, Debug)]
pub struct Header {
    pub kind: HeaderKind,
    pub fields: BTreeMap<String, u64>,
    pub opaque: Vec<u8>,
}

impl Header {
    fn new(kind: HeaderKind, fields: BTreeMap<String, u64>) -> Header {
        Header {
            kind,
            fields,
            opaque: Vec::new(),
        }
    }

    pub fn get(&self, field: &str) -> Option<u64> {
        self.fields.get(field).copied()
    }
}

/// Mutable header-stack form of a packet; the working representation inside
/// the pipeline. Deparsing re-emits headers in stack order.
#[derive(Clone, Debug, Default)]
pub struct PacketView {
    pub headers: Vec<Header>,
    pub payload: Vec<u8>,
}

impl PacketView {
    pub fn find(&self, name: &str) -> Option<&Header> {
        self.headers.iter().find(|h| h.kind.name() == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Header> {
        self.headers.iter_mut().find(|h| h.kind.name() == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn field(&self, header: &str, field: &str) -> Option<u64> {
        self.find(header).and_then(|h| h.get(field))
    }

    /// UDP/TCP ports if a transport header is present, else None.
    pub fn transport_ports(&self) -> Option<(u16, u16)> {
        let h = self.find("udp").or_else(|| self.find("tcp"))?;
        Some((h.get("src_port")? as u16, h.get("dst_port")? as u16))
    }

    /// Serialized frame length in bytes, without deparsing.
    pub fn wire_len(&self, defs: &DefSet) -> usize {
        let headers: usize = self
            .headers
            .iter()
            .map(|h| match &h.kind {
                HeaderKind::Ethernet => ETH_LEN,
                HeaderKind::Ipv4 => IPV4_LEN,
                HeaderKind::Udp => UDP_LEN,
                HeaderKind::Tcp => TCP_LEN,
                HeaderKind::Custom(n) => defs.get(n).map_or(0, |d| d.byte_len()),
            })
            .sum();
        headers + self.payload.len()
    }
}

/// Parse result: the view plus byte ranges of each header (ranges tile the
/// buffer up to `payload_offset`).
#[derive(Clone, Debug)]
pub struct ParsedStack {
    pub view: PacketView,
    pub offsets: Vec<(usize, usize)>,
    pub payload_offset: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ChainDomain {
    Ethertype,
    IpProto,
}

/// Walks the header chain from the leading Ethernet header. Custom headers are
/// recognized by their binding in the current chaining domain; an unknown
/// identifier ends the walk with the remainder treated as payload.
pub fn parse_stack(bytes: &[u8], defs: &DefSet) -> Result<ParsedStack, CodecError> {
    if bytes.len() < ETH_LEN {
        return Err(CodecError::Truncated("ethernet"));
    }
    let mut headers = Vec::new();
    let mut offsets = Vec::new();

    let eth = decode_ethernet(&bytes[..ETH_LEN]);
    let mut next_id = eth.get("ethertype").unwrap();
    headers.push(eth);
    offsets.push((0, ETH_LEN));
    let mut at = ETH_LEN;
    let mut domain = ChainDomain::Ethertype;

    loop {
        let rest = &bytes[at..];
        match domain {
            ChainDomain::Ethertype => {
                if next_id == ETHERTYPE_IPV4 as u64 {
                    if rest.len() < IPV4_LEN {
                        return Err(CodecError::Truncated("ipv4"));
                    }
                    let h = decode_ipv4(&rest[..IPV4_LEN])?;
                    next_id = h.get("protocol").unwrap();
                    headers.push(h);
                    offsets.push((at, at + IPV4_LEN));
                    at += IPV4_LEN;
                    domain = ChainDomain::IpProto;
                    continue;
                }
                if let Some(def) = defs.by_ethertype(next_id as u16) {
                    at = parse_custom_at(def, bytes, at, &mut headers, &mut offsets)?;
                    match chain_value(&headers, def) {
                        Some(v) => next_id = v,
                        None => break,
                    }
                    continue;
                }
                break; // unknown ethertype: opaque payload
            }
            ChainDomain::IpProto => {
                if next_id == IPPROTO_UDP as u64 {
                    if rest.len() < UDP_LEN {
                        return Err(CodecError::Truncated("udp"));
                    }
                    headers.push(decode_udp(&rest[..UDP_LEN]));
                    offsets.push((at, at + UDP_LEN));
                    at += UDP_LEN;
                    break;
                }
                if next_id == IPPROTO_TCP as u64 {
                    if rest.len() < TCP_LEN {
                        return Err(CodecError::Truncated("tcp"));
                    }
                    headers.push(decode_tcp(&rest[..TCP_LEN]));
                    offsets.push((at, at + TCP_LEN));
                    at += TCP_LEN;
                    break;
                }
                if next_id <= 0xff {
                    if let Some(def) = defs.by_ipproto(next_id as u8) {
                        at = parse_custom_at(def, bytes, at, &mut headers, &mut offsets)?;
                        match chain_value(&headers, def) {
                            Some(v) => next_id = v,
                            None => break,
                        }
                        continue;
                    }
                }
                break; // unknown protocol: opaque payload
            }
        }
    }

    Ok(ParsedStack {
        view: PacketView {
            headers,
            payload: bytes[at..].to_vec(),
        },
        offsets,
        payload_offset: at,
    })
}

fn parse_custom_at(
    def: &CustomHeaderDef,
    bytes: &[u8],
    at: usize,
    headers: &mut Vec<Header>,
    offsets: &mut Vec<(usize, usize)>,
) -> Result<usize, CodecError> {
    let len = def.byte_len();
    if bytes.len() - at < len {
        return Err(CodecError::Truncated("custom"));
    }
    let fields = decode_custom(def, &bytes[at..at + len])?;
    headers.push(Header::new(HeaderKind::Custom(def.name.clone()), fields));
    offsets.push((at, at + len));
    Ok(at + len)
}

fn chain_value(headers: &[Header], def: &CustomHeaderDef) -> Option<u64> {
    headers.last().and_then(|h| h.get(def.chain_name()))
}

/// Serializes the view back to wire bytes. The IPv4 checksum is recomputed
/// here, so any field mutation made on the view lands with a valid checksum.
pub fn deparse(view: &PacketView, defs: &DefSet) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(ETH_LEN + IPV4_LEN + view.payload.len());
    for h in &view.headers {
        match &h.kind {
            HeaderKind::Ethernet => encode_ethernet(h, &mut out),
            HeaderKind::Ipv4 => encode_ipv4(h, &mut out)?,
            HeaderKind::Udp => encode_udp(h, &mut out),
            HeaderKind::Tcp => encode_tcp(h, &mut out)?,
            HeaderKind::Custom(name) => {
                let def = defs
                    .get(name)
                    .ok_or_else(|| CodecError::MissingHeader(name.clone()))?;
                out.extend_from_slice(&encode_custom(def, &h.fields)?);
            }
        }
    }
    out.extend_from_slice(&view.payload);
    Ok(out)
}

fn be16(bytes: &[u8], at: usize) -> u64 {
    u16::from_be_bytes([bytes[at], bytes[at + 1]]) as u64
}

fn be32(bytes: &[u8], at: usize) -> u64 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as u64
}

fn decode_ethernet(b: &[u8]) -> Header {
    let mut f = BTreeMap::new();
    let mut dst = 0u64;
    let mut src = 0u64;
    for i in 0..6 {
        dst = (dst << 8) | b[i] as u64;
        src = (src << 8) | b[6 + i] as u64;
    }
    f.insert("dst_mac".into(), dst);
    f.insert("src_mac".into(), src);
    f.insert("ethertype".into(), be16(b, 12));
    Header::new(HeaderKind::Ethernet, f)
}

fn encode_ethernet(h: &Header, out: &mut Vec<u8>) {
    let dst = h.get("dst_mac").unwrap_or(0);
    let src = h.get("src_mac").unwrap_or(0);
    for i in (0..6).rev() {
        out.push(((dst >> (i * 8)) & 0xff) as u8);
    }
    for i in (0..6).rev() {
        out.push(((src >> (i * 8)) & 0xff) as u8);
    }
    out.extend_from_slice(&(h.get("ethertype").unwrap_or(0) as u16).to_be_bytes());
}

fn decode_ipv4(b: &[u8]) -> Result<Header, CodecError> {
    let version = b[0] >> 4;
    let ihl = b[0] & 0x0f;
    if version != 4 {
        return Err(CodecError::Unsupported(format!("IP version {version}")));
    }
    if ihl != 5 {
        return Err(CodecError::Unsupported("ipv4 options".into()));
    }
    let mut f = BTreeMap::new();
    f.insert("version".into(), version as u64);
    f.insert("ihl".into(), ihl as u64);
    f.insert("tos".into(), b[1] as u64);
    f.insert("total_length".into(), be16(b, 2));
    f.insert("identification".into(), be16(b, 4));
    f.insert("flags_frag".into(), be16(b, 6));
    f.insert("ttl".into(), b[8] as u64);
    f.insert("protocol".into(), b[9] as u64);
    f.insert("checksum".into(), be16(b, 10));
    f.insert("src_addr".into(), be32(b, 12));
    f.insert("dst_addr".into(), be32(b, 16));
    Ok(Header::new(HeaderKind::Ipv4, f))
}

fn encode_ipv4(h: &Header, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let g = |k: &str| h.get(k).unwrap_or(0);
    let mut b = [0u8; IPV4_LEN];
    b[0] = ((g("version") as u8) << 4) | (g("ihl") as u8 & 0x0f);
    b[1] = g("tos") as u8;
    b[2..4].copy_from_slice(&(g("total_length") as u16).to_be_bytes());
    b[4..6].copy_from_slice(&(g("identification") as u16).to_be_bytes());
    b[6..8].copy_from_slice(&(g("flags_frag") as u16).to_be_bytes());
    b[8] = g("ttl") as u8;
    b[9] = g("protocol") as u8;
    // checksum bytes stay zero for the computation
    b[12..16].copy_from_slice(&(g("src_addr") as u32).to_be_bytes());
    b[16..20].copy_from_slice(&(g("dst_addr") as u32).to_be_bytes());
    let sum = ipv4_checksum(&b);
    b[10..12].copy_from_slice(&sum.to_be_bytes());
    out.extend_from_slice(&b);
    Ok(())
}

/// Ones-complement sum over 16-bit words with the checksum field zeroed.
pub fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum = 0u32;
    let mut i = 0;
    while i + 1 < header.len() {
        if i != 10 {
            sum += u16::from_be_bytes([header[i], header[i + 1]]) as u32;
        }
        i += 2;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Verifies by summing all words including the stored checksum; valid iff the
/// folded ones-complement sum is 0xffff.
pub fn ipv4_checksum_ok(header: &[u8]) -> bool {
    let mut sum = 0u32;
    let mut i = 0;
    while i + 1 < header.len() {
        sum += u16::from_be_bytes([header[i], header[i + 1]]) as u32;
        i += 2;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    sum == 0xffff
}

fn decode_udp(b: &[u8]) -> Header {
    let mut f = BTreeMap::new();
    f.insert("src_port".into(), be16(b, 0));
    f.insert("dst_port".into(), be16(b, 2));
    f.insert("length".into(), be16(b, 4));
    f.insert("checksum".into(), be16(b, 6));
    Header::new(HeaderKind::Udp, f)
}

fn encode_udp(h: &Header, out: &mut Vec<u8>) {
    for k in ["src_port", "dst_port", "length", "checksum"] {
        out.extend_from_slice(&(h.get(k).unwrap_or(0) as u16).to_be_bytes());
    }
}

fn decode_tcp(b: &[u8]) -> Header {
    let mut f = BTreeMap::new();
    f.insert("src_port".into(), be16(b, 0));
    f.insert("dst_port".into(), be16(b, 2));
    let mut h = Header::new(HeaderKind::Tcp, f);
    h.opaque = b[4..TCP_LEN].to_vec();
    h
}

fn encode_tcp(h: &Header, out: &mut Vec<u8>) -> Result<(), CodecError> {
    out.extend_from_slice(&(h.get("src_port").unwrap_or(0) as u16).to_be_bytes());
    out.extend_from_slice(&(h.get("dst_port").unwrap_or(0) as u16).to_be_bytes());
    if h.opaque.len() != TCP_LEN - 4 {
        return Err(CodecError::Truncated("tcp"));
    }
    out.extend_from_slice(&h.opaque);
    Ok(())
}

/// Next-protocol field of a header that can precede another: the field name
/// and the chaining domain its value lives in.
fn next_proto_slot(h: &Header, defs: &DefSet) -> Option<(String, ChainDomain, u32)> {
    match &h.kind {
        HeaderKind::Ethernet => Some(("ethertype".into(), ChainDomain::Ethertype, 16)),
        HeaderKind::Ipv4 => Some(("protocol".into(), ChainDomain::IpProto, 8)),
        HeaderKind::Udp | HeaderKind::Tcp => None,
        HeaderKind::Custom(n) => {
            let def = defs.get(n)?;
            let chain = def.chain_name().to_string();
            def.field(&chain)?;
            let domain = match def.layer {
                HeaderLayer::L2 | HeaderLayer::L3 => ChainDomain::Ethertype,
                HeaderLayer::L4 => ChainDomain::IpProto,
            };
            Some((chain, domain, 16))
        }
    }
}

fn rewrite_pred(
    pred: &mut Header,
    defs: &DefSet,
    binding: u16,
) -> Result<u64, CodecError> {
    let (field, domain, _) = next_proto_slot(pred, defs).ok_or_else(|| {
        CodecError::Unsupported(format!(
            "{} cannot chain a following header",
            pred.kind.name()
        ))
    })?;
    if domain == ChainDomain::IpProto && binding > 0xff {
        return Err(CodecError::ChainOverflow {
            field: format!("{}.{}", pred.kind.name(), field),
            value: binding as u64,
        });
    }
    let displaced = pred.get(&field).unwrap_or(0);
    pred.fields.insert(field, binding as u64);
    Ok(displaced)
}

/// Inserts a custom header into the view per the definition's layer and op.
///
/// Custom headers of a layer form a stack in front of the layer's standard
/// header (L3 customs sit between Ethernet and IPv4, L4 customs between IPv4
/// and the transport header). `add_before` prepends to that stack: it lands
/// immediately before the first header of the layer. `add_after` appends: it
/// lands after the last custom header of the layer, or at the stack slot when
/// the stack is empty. Both rewrite the preceding next-protocol field to the
/// definition's binding and store the displaced value in the chaining field,
/// so the result re-parses. `replace` substitutes the first header of the
/// layer. Explicitly supplied values win over defaults; the chaining field is
/// always taken from the displaced value.
pub fn insert_custom_view(
    view: &mut PacketView,
    defs: &DefSet,
    def: &CustomHeaderDef,
    values: &BTreeMap<String, u64>,
) -> Result<(), CodecError> {
    def.validate()?;
    let layer_of = |h: &Header| h.kind.layer(defs);
    let def_domain = match def.layer {
        HeaderLayer::L2 | HeaderLayer::L3 => ChainDomain::Ethertype,
        HeaderLayer::L4 => ChainDomain::IpProto,
    };
    let first_of_layer = |view: &PacketView| -> Result<usize, CodecError> {
        view.headers
            .iter()
            .position(|h| layer_of(h) == def.layer)
            .ok_or_else(|| CodecError::MissingLayer(format!("{:?} for {}", def.layer, def.name)))
    };

    let mut fields: BTreeMap<String, u64> = def.defaults.clone();
    for (k, v) in values {
        let fd = def
            .field(k)
            .ok_or_else(|| CodecError::MissingValue(format!("{}.{k}", def.name)))?;
        if !fits(*v, fd.bits) {
            return Err(CodecError::ValueTooWide(format!("{}.{k}", def.name)));
        }
        fields.insert(k.clone(), *v);
    }

    match def.op {
        InsertOp::AddBefore | InsertOp::AddAfter => {
            let at = if def.op == InsertOp::AddBefore {
                first_of_layer(view)?
            } else {
                // Last header of the layer that chains successors in the
                // def's own identifier domain; the layer's standard header
                // qualifies only at L2 (Ethernet). Empty stack degenerates
                // to the slot in front of the standard header.
                match view.headers.iter().rposition(|h| {
                    layer_of(h) == def.layer
                        && next_proto_slot(h, defs).is_some_and(|(_, d, _)| d == def_domain)
                }) {
                    Some(i) => i + 1,
                    None => first_of_layer(view)?,
                }
            };
            if at == 0 {
                return Err(CodecError::Unsupported(
                    "cannot insert before the leading Ethernet header".into(),
                ));
            }
            let displaced = rewrite_pred(&mut view.headers[at - 1], defs, def.binding)?;
            set_chain(def, &mut fields, displaced)?;
            finish_fields(def, &fields)?;
            view.headers
                .insert(at, Header::new(HeaderKind::Custom(def.name.clone()), fields));
        }
        InsertOp::Replace => {
            let at = first_of_layer(view)?;
            if at == 0 {
                return Err(CodecError::Unsupported(
                    "cannot replace the leading Ethernet header".into(),
                ));
            }
            // Carry the replaced header's own next-protocol value into the
            // chain field when both exist, so the rest of the stack stays
            // parseable.
            let displaced_next = next_proto_slot(&view.headers[at], defs)
                .and_then(|(f, _, _)| view.headers[at].get(&f));
            rewrite_pred(&mut view.headers[at - 1], defs, def.binding)?;
            if let (Some(v), Some(_)) = (displaced_next, def.field(def.chain_name())) {
                if !values.contains_key(def.chain_name()) {
                    set_chain(def, &mut fields, v)?;
                }
            }
            finish_fields(def, &fields)?;
            view.headers[at] = Header::new(HeaderKind::Custom(def.name.clone()), fields);
        }
    }
    Ok(())
}

fn set_chain(
    def: &CustomHeaderDef,
    fields: &mut BTreeMap<String, u64>,
    displaced: u64,
) -> Result<(), CodecError> {
    let chain = def.chain_name();
    if let Some(fd) = def.field(chain) {
        if !fits(displaced, fd.bits) {
            return Err(CodecError::ChainOverflow {
                field: format!("{}.{chain}", def.name),
                value: displaced,
            });
        }
        fields.insert(chain.to_string(), displaced);
    }
    Ok(())
}

fn finish_fields(def: &CustomHeaderDef, fields: &BTreeMap<String, u64>) -> Result<(), CodecError> {
    for f in &def.fields {
        if !fields.contains_key(&f.name) {
            return Err(CodecError::MissingValue(format!("{}.{}", def.name, f.name)));
        }
    }
    Ok(())
}

/// Removes the first instance of `def` from the view, restoring the displaced
/// next-protocol value into the predecessor. Exact inverse of insertion for
/// the add_before/add_after ops.
pub fn strip_custom_view(
    view: &mut PacketView,
    defs: &DefSet,
    def: &CustomHeaderDef,
) -> Result<(), CodecError> {
    if def.op == InsertOp::Replace {
        return Err(CodecError::Unsupported(
            "cannot strip a replace-mode header".into(),
        ));
    }
    let at = view
        .headers
        .iter()
        .position(|h| h.kind == HeaderKind::Custom(def.name.clone()))
        .ok_or_else(|| CodecError::MissingHeader(def.name.clone()))?;
    if at == 0 {
        return Err(CodecError::MissingHeader(def.name.clone()));
    }
    let chain_val = view.headers[at]
        .get(def.chain_name())
        .ok_or_else(|| CodecError::MissingValue(format!("{}.{}", def.name, def.chain_name())))?;
    let pred = &mut view.headers[at - 1];
    let (field, domain, _) = next_proto_slot(pred, defs).ok_or_else(|| {
        CodecError::Unsupported(format!(
            "{} cannot chain a following header",
            pred.kind.name()
        ))
    })?;
    if domain == ChainDomain::IpProto && chain_val > 0xff {
        return Err(CodecError::ChainOverflow {
            field: format!("{}.{}", pred.kind.name(), field),
            value: chain_val,
        });
    }
    pred.fields.insert(field, chain_val);
    view.headers.remove(at);
    Ok(())
}

/// Byte-level wrapper: parse, insert, deparse.
pub fn insert_custom(
    bytes: &[u8],
    defs: &DefSet,
    def: &CustomHeaderDef,
    values: &BTreeMap<String, u64>,
) -> Result<Vec<u8>, CodecError> {
    let mut parsed = parse_stack(bytes, defs)?;
    insert_custom_view(&mut parsed.view, defs, def, values)?;
    deparse(&parsed.view, defs)
}

/// Byte-level wrapper: parse, strip, deparse.
pub fn strip_custom(
    bytes: &[u8],
    defs: &DefSet,
    def: &CustomHeaderDef,
) -> Result<Vec<u8>, CodecError> {
    let mut parsed = parse_stack(bytes, defs)?;
    strip_custom_view(&mut parsed.view, defs, def)?;
    deparse(&parsed.view, defs)
}

/// Bit width of a standard-header field, if the header/field pair exists.
pub fn standard_field_bits(header: &str, field: &str) -> Option<u32> {
    let w = match (header, field) {
        ("ethernet", "dst_mac") | ("ethernet", "src_mac") => 48,
        ("ethernet", "ethertype") => 16,
        ("ipv4", "version") | ("ipv4", "ihl") => 4,
        ("ipv4", "tos") | ("ipv4", "ttl") | ("ipv4", "protocol") => 8,
        ("ipv4", "total_length")
        | ("ipv4", "identification")
        | ("ipv4", "flags_frag")
        | ("ipv4", "checksum") => 16,
        ("ipv4", "src_addr") | ("ipv4", "dst_addr") => 32,
        ("udp", "src_port") | ("udp", "dst_port") | ("udp", "length") | ("udp", "checksum") => 16,
        ("tcp", "src_port") | ("tcp", "dst_port") => 16,
        _ => return None,
    };
    Some(w)
}

/// Builders used by hosts and tests.
pub mod build {
    use super::*;

    pub fn ethernet(dst_mac: u64, src_mac: u64, ethertype: u16) -> Header {
        let mut f = BTreeMap::new();
        f.insert("dst_mac".into(), dst_mac);
        f.insert("src_mac".into(), src_mac);
        f.insert("ethertype".into(), ethertype as u64);
        Header::new(HeaderKind::Ethernet, f)
    }

    pub fn ipv4(src: u64, dst: u64, protocol: u8, total_length: u16, ttl: u8) -> Header {
        let mut f = BTreeMap::new();
        f.insert("version".into(), 4);
        f.insert("ihl".into(), 5);
        f.insert("tos".into(), 0);
        f.insert("total_length".into(), total_length as u64);
        f.insert("identification".into(), 0);
        f.insert("flags_frag".into(), 0);
        f.insert("ttl".into(), ttl as u64);
        f.insert("protocol".into(), protocol as u64);
        f.insert("checksum".into(), 0);
        f.insert("src_addr".into(), src);
        f.insert("dst_addr".into(), dst);
        Header::new(HeaderKind::Ipv4, f)
    }

    pub fn udp(src_port: u16, dst_port: u16, length: u16) -> Header {
        let mut f = BTreeMap::new();
        f.insert("src_port".into(), src_port as u64);
        f.insert("dst_port".into(), dst_port as u64);
        f.insert("length".into(), length as u64);
        f.insert("checksum".into(), 0);
        Header::new(HeaderKind::Udp, f)
    }

    pub fn tcp(src_port: u16, dst_port: u16) -> Header {
        let mut f = BTreeMap::new();
        f.insert("src_port".into(), src_port as u64);
        f.insert("dst_port".into(), dst_port as u64);
        let mut h = Header::new(HeaderKind::Tcp, f);
        h.opaque = vec![0u8; TCP_LEN - 4];
        h
    }

    /// Ethernet/IPv4/UDP frame with a zero-filled payload.
    pub fn udp_frame(
        dst_mac: u64,
        src_mac: u64,
        src_ip: u64,
        dst_ip: u64,
        src_port: u16,
        dst_port: u16,
        payload_len: usize,
    ) -> PacketView {
        let total = (IPV4_LEN + UDP_LEN + payload_len) as u16;
        PacketView {
            headers: vec![
                ethernet(dst_mac, src_mac, ETHERTYPE_IPV4),
                ipv4(src_ip, dst_ip, IPPROTO_UDP, total, 64),
                udp(src_port, dst_port, (UDP_LEN + payload_len) as u16),
            ],
            payload: vec![0u8; payload_len],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::custom::FieldDef;

    fn tunnel_def() -> CustomHeaderDef {
        CustomHeaderDef {
            name: "myTunnel".into(),
            layer: HeaderLayer::L3,
            op: InsertOp::AddBefore,
            binding: 0x1212,
            chain_field: None,
            fields: vec![
                FieldDef { name: "proto_id".into(), bits: 16 },
                FieldDef { name: "dst_id".into(), bits: 16 },
            ],
            defaults: BTreeMap::new(),
        }
    }

    fn defs_with_tunnel() -> DefSet {
        let mut d = DefSet::new();
        d.insert(tunnel_def()).unwrap();
        d
    }

    fn sample_udp_bytes(defs: &DefSet) -> Vec<u8> {
        let view = build::udp_frame(0x0102030405, 0x0607_0809_0a0b, 0x0a000101, 0x0a000202, 5000, 9000, 32);
        deparse(&view, defs).unwrap()
    }

    #[test]
    fn parse_udp_frame_tiles_offsets() {
        let defs = DefSet::new();
        let bytes = sample_udp_bytes(&defs);
        let parsed = parse_stack(&bytes, &defs).unwrap();
        assert_eq!(parsed.offsets, vec![(0, 14), (14, 34), (34, 42)]);
        assert_eq!(parsed.payload_offset, 42);
        assert_eq!(parsed.view.payload.len(), 32);
        assert_eq!(parsed.view.field("udp", "dst_port"), Some(9000));
        assert_eq!(parsed.view.field("ipv4", "dst_addr"), Some(0x0a000202));
    }

    #[test]
    fn deparse_inverts_parse() {
        let defs = defs_with_tunnel();
        let bytes = sample_udp_bytes(&defs);
        let parsed = parse_stack(&bytes, &defs).unwrap();
        assert_eq!(deparse(&parsed.view, &defs).unwrap(), bytes);
    }

    #[test]
    fn checksum_is_valid_on_emitted_frames() {
        let defs = DefSet::new();
        let bytes = sample_udp_bytes(&defs);
        assert!(ipv4_checksum_ok(&bytes[14..34]));
    }

    #[test]
    fn unknown_ethertype_is_opaque_payload() {
        let defs = DefSet::new();
        let view = PacketView {
            headers: vec![build::ethernet(1, 2, 0x88cc)],
            payload: vec![1, 2, 3, 4],
        };
        let bytes = deparse(&view, &defs).unwrap();
        let parsed = parse_stack(&bytes, &defs).unwrap();
        assert_eq!(parsed.view.headers.len(), 1);
        assert_eq!(parsed.view.payload, vec![1, 2, 3, 4]);
    }

    #[test]
    fn truncated_ipv4_is_an_error() {
        let defs = DefSet::new();
        let bytes = sample_udp_bytes(&defs);
        let err = parse_stack(&bytes[..20], &defs).unwrap_err();
        assert!(matches!(err, CodecError::Truncated("ipv4")));
    }

    #[test]
    fn tunnel_insert_rewrites_chain() {
        let defs = defs_with_tunnel();
        let def = tunnel_def();
        let bytes = sample_udp_bytes(&defs);
        let mut vals = BTreeMap::new();
        vals.insert("dst_id".into(), 0x22u64);
        let out = insert_custom(&bytes, &defs, &def, &vals).unwrap();
        assert_eq!(out.len(), bytes.len() + 4);

        let parsed = parse_stack(&out, &defs).unwrap();
        let names: Vec<&str> = parsed.view.headers.iter().map(|h| h.kind.name()).collect();
        assert_eq!(names, vec!["ethernet", "myTunnel", "ipv4", "udp"]);
        assert_eq!(parsed.view.field("ethernet", "ethertype"), Some(0x1212));
        assert_eq!(parsed.view.field("myTunnel", "proto_id"), Some(0x0800));
        assert_eq!(parsed.view.field("myTunnel", "dst_id"), Some(0x22));
        // Inner headers untouched.
        assert_eq!(parsed.view.field("ipv4", "dst_addr"), Some(0x0a000202));
    }

    #[test]
    fn strip_inverts_insert() {
        let defs = defs_with_tunnel();
        let def = tunnel_def();
        let bytes = sample_udp_bytes(&defs);
        let mut vals = BTreeMap::new();
        vals.insert("dst_id".into(), 0x22u64);
        let tunneled = insert_custom(&bytes, &defs, &def, &vals).unwrap();
        let stripped = strip_custom(&tunneled, &defs, &def).unwrap();
        assert_eq!(stripped, bytes);
    }

    #[test]
    fn add_after_appends_after_last_of_layer() {
        let mut defs = defs_with_tunnel();
        let second = CustomHeaderDef {
            name: "label".into(),
            layer: HeaderLayer::L3,
            op: InsertOp::AddAfter,
            binding: 0x1313,
            chain_field: None,
            fields: vec![
                FieldDef { name: "proto_id".into(), bits: 16 },
                FieldDef { name: "tag".into(), bits: 16 },
            ],
            defaults: BTreeMap::new(),
        };
        defs.insert(second.clone()).unwrap();

        let bytes = sample_udp_bytes(&defs);
        let mut vals = BTreeMap::new();
        vals.insert("dst_id".into(), 0x22u64);
        let tunneled = insert_custom(&bytes, &defs, &tunnel_def(), &vals).unwrap();

        let mut tagvals = BTreeMap::new();
        tagvals.insert("tag".into(), 7u64);
        // The tag appends to the L3 custom stack, after myTunnel.
        let tagged = insert_custom(&tunneled, &defs, &second, &tagvals).unwrap();
        let parsed = parse_stack(&tagged, &defs).unwrap();
        let names: Vec<&str> = parsed.view.headers.iter().map(|h| h.kind.name()).collect();
        assert_eq!(names, vec!["ethernet", "myTunnel", "label", "ipv4", "udp"]);
        assert_eq!(parsed.view.field("myTunnel", "proto_id"), Some(0x1313));
        assert_eq!(parsed.view.field("label", "proto_id"), Some(0x0800));
        assert_eq!(parsed.view.field("label", "tag"), Some(7));
        assert_eq!(parsed.view.field("ipv4", "protocol"), Some(IPPROTO_UDP as u64));

        // add_before prepends instead: it lands in front of myTunnel.
        let fronted = insert_custom(&tunneled, &defs, &tunnel_def(), &vals);
        let names: Vec<String> = parse_stack(&fronted.unwrap(), &defs)
            .unwrap()
            .view
            .headers
            .iter()
            .map(|h| h.kind.name().to_string())
            .collect();
        assert_eq!(names, vec!["ethernet", "myTunnel", "myTunnel", "ipv4", "udp"]);

        assert_eq!(strip_custom(&tagged, &defs, &second).unwrap(), tunneled);
    }

    #[test]
    fn add_after_on_empty_stack_lands_before_standard_header() {
        let defs = defs_with_tunnel();
        let late = CustomHeaderDef {
            name: "late".into(),
            layer: HeaderLayer::L3,
            op: InsertOp::AddAfter,
            binding: 0x1414,
            chain_field: None,
            fields: vec![FieldDef { name: "proto_id".into(), bits: 16 }],
            defaults: BTreeMap::new(),
        };
        let mut defs2 = defs_with_tunnel();
        defs2.insert(late.clone()).unwrap();
        let bytes = sample_udp_bytes(&defs);
        let out = insert_custom(&bytes, &defs2, &late, &BTreeMap::new()).unwrap();
        let parsed = parse_stack(&out, &defs2).unwrap();
        let names: Vec<&str> = parsed.view.headers.iter().map(|h| h.kind.name()).collect();
        assert_eq!(names, vec!["ethernet", "late", "ipv4", "udp"]);
        assert_eq!(parsed.view.field("ethernet", "ethertype"), Some(0x1414));
        assert_eq!(parsed.view.field("late", "proto_id"), Some(0x0800));
    }

    #[test]
    fn replace_missing_layer_is_an_error() {
        let defs = DefSet::new();
        let def = CustomHeaderDef {
            name: "xport".into(),
            layer: HeaderLayer::L4,
            op: InsertOp::Replace,
            binding: 0x99,
            chain_field: None,
            fields: vec![FieldDef { name: "v".into(), bits: 16 }],
            defaults: BTreeMap::new(),
        };
        // IPv4-only packet: no L4 header to replace.
        let view = PacketView {
            headers: vec![
                build::ethernet(1, 2, ETHERTYPE_IPV4),
                build::ipv4(10, 20, 200, 20, 64),
            ],
            payload: vec![],
        };
        let bytes = deparse(&view, &defs).unwrap();
        let err = insert_custom(&bytes, &defs, &def, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, CodecError::MissingLayer(_)));
    }

    #[test]
    fn l4_add_before_rewrites_ipv4_protocol() {
        let mut defs = DefSet::new();
        let def = CustomHeaderDef {
            name: "seq".into(),
            layer: HeaderLayer::L4,
            op: InsertOp::AddBefore,
            binding: 0x90,
            chain_field: None,
            fields: vec![
                FieldDef { name: "proto_id".into(), bits: 16 },
                FieldDef { name: "seqno".into(), bits: 32 },
            ],
            defaults: BTreeMap::new(),
        };
        defs.insert(def.clone()).unwrap();
        let bytes = sample_udp_bytes(&defs);
        let mut vals = BTreeMap::new();
        vals.insert("seqno".into(), 99u64);
        let out = insert_custom(&bytes, &defs, &def, &vals).unwrap();
        let parsed = parse_stack(&out, &defs).unwrap();
        let names: Vec<&str> = parsed.view.headers.iter().map(|h| h.kind.name()).collect();
        assert_eq!(names, vec!["ethernet", "ipv4", "seq", "udp"]);
        assert_eq!(parsed.view.field("ipv4", "protocol"), Some(0x90));
        assert_eq!(parsed.view.field("seq", "proto_id"), Some(IPPROTO_UDP as u64));
        let back = strip_custom(&out, &defs, &def).unwrap();
        assert_eq!(back, bytes);
    }

    #[test]
    fn tcp_frame_roundtrip() {
        let defs = DefSet::new();
        let view = PacketView {
            headers: vec![
                build::ethernet(1, 2, ETHERTYPE_IPV4),
                build::ipv4(10, 20, IPPROTO_TCP, (IPV4_LEN + TCP_LEN + 5) as u16, 64),
                build::tcp(1234, 80),
            ],
            payload: vec![9; 5],
        };
        let bytes = deparse(&view, &defs).unwrap();
        let parsed = parse_stack(&bytes, &defs).unwrap();
        assert_eq!(parsed.view.transport_ports(), Some((1234, 80)));
        assert_eq!(deparse(&parsed.view, &defs).unwrap(), bytes);
    }
}
