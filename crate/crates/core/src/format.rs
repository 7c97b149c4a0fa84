//! The `OODB` bank file format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "OODB"
//!      4     4  version (u32 LE) = 1
//!      8     4  n (u32 LE)
//!     12     4  d (u32 LE)
//!     16     4  K (u32 LE)
//!     20     1  flags: bit0 logits, bit1 labels, bit2 head
//!     21     7  zero padding
//!     28        features   n*d f32 LE, row-major
//!               logits     n*K f32 LE, row-major      (if bit0)
//!               labels     n   i32 LE                 (if bit1)
//!               W          K*d f32 LE, row-major      (if bit2)
//!               b          K   f32 LE                 (if bit2)
//! ```
//!
//! Nothing follows the last section. Values are narrowed from `f64` on write;
//! a value that overflows `f32` is rejected.

use std::path::Path;

use crate::bank::{ClassifierHead, FeatureBank};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OODB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

pub const FLAG_LOGITS: u8 = 1;
pub const FLAG_LABELS: u8 = 1 << 1;
pub const FLAG_HEAD: u8 = 1 << 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankFileHeader {
    pub version: u32,
    pub n: u32,
    pub d: u32,
    pub num_classes: u32,
    pub flags: u8,
}

impl BankFileHeader {
    pub fn has_logits(&self) -> bool {
        self.flags & FLAG_LOGITS != 0
    }

    pub fn has_labels(&self) -> bool {
        self.flags & FLAG_LABELS != 0
    }

    pub fn has_head(&self) -> bool {
        self.flags & FLAG_HEAD != 0
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.n.to_le_bytes());
        out[12..16].copy_from_slice(&self.d.to_le_bytes());
        out[16..20].copy_from_slice(&self.num_classes.to_le_bytes());
        out[20] = self.flags;
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(BankFileHeader {
            version,
            n: word(8),
            d: word(12),
            num_classes: word(16),
            flags: bytes[20],
        })
    }

    /// Total file length implied by the header.
    pub fn file_len(&self) -> u64 {
        let (n, d, k) = (u64::from(self.n), u64::from(self.d), u64::from(self.num_classes));
        let mut len = HEADER_LEN as u64 + 4 * n * d;
        if self.has_logits() {
            len += 4 * n * k;
        }
        if self.has_labels() {
            len += 4 * n;
        }
        if self.has_head() {
            len += 4 * (k * d + k);
        }
        len
    }
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Dimension(format!("{what} = {value} exceeds u32")))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64], section: &'static str) -> Result<()> {
    for (index, &v) in values.iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite { section, index });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

/// Serializes a bank (and optional head) to the exact on-disk byte layout.
pub fn encode_bank(bank: &FeatureBank, head: Option<&ClassifierHead>) -> Result<Vec<u8>> {
    if let Some(h) = head {
        h.check_bank(bank)?;
        if bank.num_classes() != h.num_classes() {
            return Err(Error::Dimension(format!(
                "bank K = {} but head K = {}",
                bank.num_classes(),
                h.num_classes()
            )));
        }
    }
    let mut flags = 0u8;
    if bank.has_logits() {
        flags |= FLAG_LOGITS;
    }
    if bank.has_labels() {
        flags |= FLAG_LABELS;
    }
    if head.is_some() {
        flags |= FLAG_HEAD;
    }
    let header = BankFileHeader {
        version: VERSION,
        n: to_u32(bank.n(), "n")?,
        d: to_u32(bank.d(), "d")?,
        num_classes: to_u32(bank.num_classes(), "K")?,
        flags,
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(&header.to_bytes());
    push_f32s(&mut out, bank.features(), "features")?;
    if let Some(l) = bank.logits() {
        push_f32s(&mut out, l, "logits")?;
    }
    if let Some(y) = bank.labels() {
        for &c in y {
            out.extend_from_slice(&(c as i32).to_le_bytes());
        }
    }
    if let Some(h) = head {
        push_f32s(&mut out, h.weights(), "head weights")?;
        push_f32s(&mut out, h.bias(), "head bias")?;
    }
    debug_assert_eq!(out.len() as u64, header.file_len());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn f32s(&mut self, count: usize, section: &'static str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for index in 0..count {
            let v = f32::from_le_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
            self.at += 4;
            if !v.is_finite() {
                return Err(Error::NonFinite { section, index });
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }

    fn i32s(&mut self, count: usize) -> Vec<i32> {
        let out = self.bytes[self.at..self.at + 4 * count]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.at += 4 * count;
        out
    }
}

/// Exact inverse of [`encode_bank`].
pub fn decode_bank(bytes: &[u8]) -> Result<(FeatureBank, Option<ClassifierHead>)> {
    let header = BankFileHeader::parse(bytes)?;
    let expected = header.file_len();
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            extra: found - expected,
        });
    }
    let (n, d, k) = (
        header.n as usize,
        header.d as usize,
        header.num_classes as usize,
    );
    let mut cur = Cursor {
        bytes,
        at: HEADER_LEN,
    };
    let features = cur.f32s(n * d, "features")?;
    let logits = if header.has_logits() {
        Some(cur.f32s(n * k, "logits")?)
    } else {
        None
    };
    let labels = if header.has_labels() {
        let raw = cur.i32s(n);
        let mut labels = Vec::with_capacity(n);
        for (row, &c) in raw.iter().enumerate() {
            if c < 0 || c as usize >= k {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: i64::from(c),
                    num_classes: k,
                });
            }
            labels.push(c as u32);
        }
        Some(labels)
    } else {
        None
    };
    let head = if header.has_head() {
        let w = cur.f32s(k * d, "head weights")?;
        let b = cur.f32s(k, "head bias")?;
        Some(ClassifierHead::new(k, d, w, b)?)
    } else {
        None
    };
    let bank = FeatureBank::new(d, k, features, logits, labels)?;
    Ok((bank, head))
}

pub fn write_bank(
    path: impl AsRef<Path>,
    bank: &FeatureBank,
    head: Option<&ClassifierHead>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bank(bank, head)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<(FeatureBank, Option<ClassifierHead>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}
