//! On-disk message format.
//!
//! Every message is a pair of files in the fabric directory:
//!
//! ```text
//! m_{seq:08}_{src:05}_{dst:05}_{tag:010}.dat   header + payload
//! m_{seq:08}_{src:05}_{dst:05}_{tag:010}.ok    zero-length ready marker
//! ```
//!
//! The `.dat` file starts with a fixed 32-byte little-endian header:
//!
//! | offset | size | field          |
//! |--------|------|----------------|
//! | 0      | 4    | magic `IHPC`   |
//! | 4      | 1    | version (1)    |
//! | 5      | 1    | payload type   |
//! | 6      | 2    | reserved (0)   |
//! | 8      | 4    | src            |
//! | 12     | 4    | dst            |
//! | 16     | 4    | tag            |
//! | 20     | 4    | seq            |
//! | 24     | 8    | payload length |

use std::fmt;

pub const MAGIC: [u8; 4] = *b"IHPC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;

pub const DATA_EXT: &str = "dat";
pub const READY_EXT: &str = "ok";

/// Kind of bytes carried by a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadType {
    RawBytes,
    TypedArray,
    Utf8Text,
}

impl PayloadType {
    pub fn code(self) -> u8 {
        match self {
            PayloadType::RawBytes => 0,
            PayloadType::TypedArray => 1,
            PayloadType::Utf8Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PayloadType::RawBytes),
            1 => Some(PayloadType::TypedArray),
            2 => Some(PayloadType::Utf8Text),
            _ => None,
        }
    }
}

/// Decoded message header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub payload_type: PayloadType,
    pub src: u32,
    pub dst: u32,
    pub tag: u32,
    pub seq: u32,
    pub payload_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeaderError {
    Truncated(usize),
    BadMagic([u8; 4]),
    BadVersion(u8),
    BadPayloadType(u8),
    BadReserved(u16),
}

impl fmt::Display for HeaderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeaderError::Truncated(n) => write!(f, "header truncated at {n} bytes"),
            HeaderError::BadMagic(m) => write!(f, "bad magic {m:02x?}"),
            HeaderError::BadVersion(v) => write!(f, "unsupported version {v}"),
            HeaderError::BadPayloadType(t) => write!(f, "unknown payload type {t}"),
            HeaderError::BadReserved(r) => write!(f, "reserved field is {r:#06x}, expected 0"),
        }
    }
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.payload_type.code();
        // out[6..8] reserved, zero
        out[8..12].copy_from_slice(&self.src.to_le_bytes());
        out[12..16].copy_from_slice(&self.dst.to_le_bytes());
        out[16..20].copy_from_slice(&self.tag.to_le_bytes());
        out[20..24].copy_from_slice(&self.seq.to_le_bytes());
        out[24..32].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HeaderError> {
        if bytes.len() < HEADER_LEN {
            return Err(HeaderError::Truncated(bytes.len()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(HeaderError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(HeaderError::BadVersion(bytes[4]));
        }
        let payload_type =
            PayloadType::from_code(bytes[5]).ok_or(HeaderError::BadPayloadType(bytes[5]))?;
        let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
        if reserved != 0 {
            return Err(HeaderError::BadReserved(reserved));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        Ok(Header {
            payload_type,
            src: u32_at(8),
            dst: u32_at(12),
            tag: u32_at(16),
            seq: u32_at(20),
            payload_len: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
        })
    }
}

/// Identity of one message file pair, recoverable from its file name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageName {
    pub seq: u32,
    pub src: u32,
    pub dst: u32,
    pub tag: u32,
}

impl MessageName {
    pub fn stem(&self) -> String {
        format!(
            "m_{:08}_{:05}_{:05}_{:010}",
            self.seq, self.src, self.dst, self.tag
        )
    }

    pub fn data_file(&self) -> String {
        format!("{}.{DATA_EXT}", self.stem())
    }

    pub fn ready_file(&self) -> String {
        format!("{}.{READY_EXT}", self.stem())
    }

    /// Temporary name the payload is written under before it is renamed into place.
    /// The leading dot keeps it out of every `m_*` scan.
    pub fn temp_file(&self) -> String {
        format!(".{}.tmp", self.stem())
    }

    /// Parses `m_SSSSSSSS_sssss_ddddd_tttttttttt` (no extension).
    pub fn parse_stem(stem: &str) -> Option<Self> {
        let rest = stem.strip_prefix("m_")?;
        let mut parts = rest.split('_');
        let seq = parse_fixed(parts.next()?, 8)?;
        let src = parse_fixed(parts.next()?, 5)?;
        let dst = parse_fixed(parts.next()?, 5)?;
        let tag = parse_fixed(parts.next()?, 10)?;
        if parts.next().is_some() {
            return None;
        }
        Some(MessageName { seq, src, dst, tag })
    }

    /// Parses a full file name, returning the message identity and its extension.
    pub fn parse_file(name: &str) -> Option<(Self, &str)> {
        let (stem, ext) = name.rsplit_once('.')?;
        Some((Self::parse_stem(stem)?, ext))
    }
}

// Fields wider than their pad width are still accepted; seq may exceed 8 digits.
fn parse_fixed(field: &str, min_width: usize) -> Option<u32> {
    if field.len() < min_width || !field.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    field.parse().ok()
}
