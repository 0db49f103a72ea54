//! User-defined header formats: bit-exact field layout plus the chaining
//! metadata needed to splice them into a standard protocol stack.

use super::CodecError;
use std::collections::BTreeMap;

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum HeaderLayer {
    L2,
    L3,
    L4,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOp {
    AddBefore,
    AddAfter,
    Replace,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldDef {
    pub name: String,
    pub bits: u32,
}

/// A custom header definition.
///
/// `binding` is the value that identifies this header to its predecessor: an
/// ethertype when the header sits in ethertype-chained position (after
/// Ethernet or another L2/L3 header), an IPv4 protocol number when it sits
/// after IPv4. `chain_field` names the field that carries the displaced
/// next-protocol value so the original stack can be reconstructed.
#[derive(Clone, Debug)]
pub struct CustomHeaderDef {
    pub name: String,
    pub layer: HeaderLayer,
    pub op: InsertOp,
    pub binding: u16,
    pub chain_field: Option<String>,
    pub fields: Vec<FieldDef>,
    pub defaults: BTreeMap<String, u64>,
}

impl CustomHeaderDef {
    pub fn total_bits(&self) -> u32 {
        self.fields.iter().map(|f| f.bits).sum()
    }

    pub fn byte_len(&self) -> usize {
        (self.total_bits() / 8) as usize
    }

    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Structural checks; every definition must pass these before use.
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.name.is_empty() {
            return Err(CodecError::BadDef("empty header name".into()));
        }
        if self.fields.is_empty() {
            return Err(CodecError::BadDef(format!("{}: no fields", self.name)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.fields {
            if !(1..=64).contains(&f.bits) {
                return Err(CodecError::BadDef(format!(
                    "{}.{}: width {} out of 1..=64",
                    self.name, f.name, f.bits
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(CodecError::BadDef(format!(
                    "{}: duplicate field {}",
                    self.name, f.name
                )));
            }
        }
        if !self.total_bits().is_multiple_of(8) {
            return Err(CodecError::BadDef(format!(
                "{}: total width {} bits is not byte aligned",
                self.name,
                self.total_bits()
            )));
        }
        for (k, v) in &self.defaults {
            let f = self.field(k).ok_or_else(|| {
                CodecError::BadDef(format!("{}: default for unknown field {k}", self.name))
            })?;
            if !fits(*v, f.bits) {
                return Err(CodecError::ValueTooWide(format!("{}.{k}", self.name)));
            }
        }
        if matches!(self.op, InsertOp::AddBefore | InsertOp::AddAfter) {
            let chain = self.chain_name();
            if self.field(chain).is_none() {
                return Err(CodecError::BadDef(format!(
                    "{}: chaining field {chain} is required for add_before/add_after",
                    self.name
                )));
            }
        }
        if matches!(self.layer, HeaderLayer::L4) && self.binding > 0xff {
            return Err(CodecError::BadDef(format!(
                "{}: L4 binding {:#x} does not fit an IPv4 protocol number",
                self.name, self.binding
            )));
        }
        Ok(())
    }

    /// The protocol-chaining field name; defaults to `proto_id`.
    pub fn chain_name(&self) -> &str {
        self.chain_field.as_deref().unwrap_or("proto_id")
    }
}

pub fn fits(value: u64, bits: u32) -> bool {
    bits >= 64 || value < (1u64 << bits)
}

/// Packs field values MSB-first into a big-endian byte string.
pub fn encode_custom(
    def: &CustomHeaderDef,
    values: &BTreeMap<String, u64>,
) -> Result<Vec<u8>, CodecError> {
    let mut out = vec![0u8; def.byte_len()];
    let mut bit = 0usize;
    for f in &def.fields {
        let v = match values.get(&f.name).or_else(|| def.defaults.get(&f.name)) {
            Some(v) => *v,
            None => return Err(CodecError::MissingValue(format!("{}.{}", def.name, f.name))),
        };
        if !fits(v, f.bits) {
            return Err(CodecError::ValueTooWide(format!("{}.{}", def.name, f.name)));
        }
        write_bits(&mut out, bit, f.bits as usize, v);
        bit += f.bits as usize;
    }
    Ok(out)
}

/// Inverse of [`encode_custom`]; `bytes` must hold at least the header.
pub fn decode_custom(
    def: &CustomHeaderDef,
    bytes: &[u8],
) -> Result<BTreeMap<String, u64>, CodecError> {
    if bytes.len() < def.byte_len() {
        return Err(CodecError::Truncated("custom"));
    }
    let mut map = BTreeMap::new();
    let mut bit = 0usize;
    for f in &def.fields {
        map.insert(f.name.clone(), read_bits(bytes, bit, f.bits as usize));
        bit += f.bits as usize;
    }
    Ok(map)
}

fn write_bits(buf: &mut [u8], start_bit: usize, width: usize, value: u64) {
    for i in 0..width {
        let bit = (value >> (width - 1 - i)) & 1;
        let pos = start_bit + i;
        if bit == 1 {
            buf[pos / 8] |= 1 << (7 - pos % 8);
        }
    }
}

fn read_bits(buf: &[u8], start_bit: usize, width: usize) -> u64 {
    let mut v = 0u64;
    for i in 0..width {
        let pos = start_bit + i;
        let bit = (buf[pos / 8] >> (7 - pos % 8)) & 1;
        v = (v << 1) | bit as u64;
    }
    v
}

/// The set of custom header definitions known to one parser (a switch binds a
/// subset, hosts usually know all of them). Lookup tables index bindings per
/// chaining domain so the stack walk can resolve what follows each header.
#[derive(Clone, Debug, Default)]
pub struct DefSet {
    defs: BTreeMap<String, CustomHeaderDef>,
    by_ethertype: BTreeMap<u16, String>,
    by_ipproto: BTreeMap<u8, String>,
}

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IPPROTO_UDP: u8 = 17;
pub const IPPROTO_TCP: u8 = 6;

impl DefSet {
    pub fn new() -> DefSet {
        DefSet::default()
    }

    pub fn insert(&mut self, def: CustomHeaderDef) -> Result<(), CodecError> {
        def.validate()?;
        if self.defs.contains_key(&def.name) {
            return Err(CodecError::BadDef(format!("duplicate header {}", def.name)));
        }
        match def.layer {
            HeaderLayer::L2 | HeaderLayer::L3 => {
                if def.binding == ETHERTYPE_IPV4 {
                    return Err(CodecError::BadDef(format!(
                        "{}: binding {:#x} collides with IPv4",
                        def.name, def.binding
                    )));
                }
                if let Some(other) = self.by_ethertype.insert(def.binding, def.name.clone()) {
                    return Err(CodecError::BadDef(format!(
                        "{} and {other} share ethertype {:#x}",
                        def.name, def.binding
                    )));
                }
            }
            HeaderLayer::L4 => {
                let p = def.binding as u8;
                if p == IPPROTO_UDP || p == IPPROTO_TCP {
                    return Err(CodecError::BadDef(format!(
                        "{}: binding {p} collides with a standard transport",
                        def.name
                    )));
                }
                if let Some(other) = self.by_ipproto.insert(p, def.name.clone()) {
                    return Err(CodecError::BadDef(format!(
                        "{} and {other} share protocol {p}",
                        def.name
                    )));
                }
            }
        }
        self.defs.insert(def.name.clone(), def);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CustomHeaderDef> {
        self.defs.get(name)
    }

    pub fn by_ethertype(&self, et: u16) -> Option<&CustomHeaderDef> {
        self.by_ethertype.get(&et).and_then(|n| self.defs.get(n))
    }

    pub fn by_ipproto(&self, p: u8) -> Option<&CustomHeaderDef> {
        self.by_ipproto.get(&p).and_then(|n| self.defs.get(n))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.defs.keys().map(|s| s.as_str())
    }

    /// Restricts the set to the named definitions (a switch pipeline's bindings).
    pub fn subset(&self, names: &[String]) -> Result<DefSet, CodecError> {
        let mut out = DefSet::new();
        for n in names {
            let def = self
                .get(n)
                .ok_or_else(|| CodecError::MissingHeader(n.clone()))?;
            out.insert(def.clone())?;
        }
        Ok(out)
    }
}
