//! CRC32 (IEEE, reflected) and the 5-tuple flow hash built on it.

use crate::packet::PacketView;

const fn build_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 == 1 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = build_table();

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    !c
}

/// Flow hash over (src_ip, dst_ip, protocol, src_port, dst_port, seed),
/// big-endian. Missing fields contribute zero, so non-IP packets still hash
/// deterministically. Payload bytes never participate.
pub fn five_tuple_hash(view: &PacketView, seed: u32) -> u32 {
    let mut buf = [0u8; 17];
    let src = view.field("ipv4", "src_addr").unwrap_or(0) as u32;
    let dst = view.field("ipv4", "dst_addr").unwrap_or(0) as u32;
    let proto = view.field("ipv4", "protocol").unwrap_or(0) as u8;
    let (sp, dp) = view.transport_ports().unwrap_or((0, 0));
    buf[0..4].copy_from_slice(&src.to_be_bytes());
    buf[4..8].copy_from_slice(&dst.to_be_bytes());
    buf[8] = proto;
    buf[9..11].copy_from_slice(&sp.to_be_bytes());
    buf[11..13].copy_from_slice(&dp.to_be_bytes());
    buf[13..17].copy_from_slice(&seed.to_be_bytes());
    crc32(&buf)
}
