//! Shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::path::PathBuf;

use nnguide::{ClassifierHead, FeatureBank};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Field values of a bank file, decoded by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub version: u32,
    pub n: u32,
    pub d: u32,
    pub k: u32,
    pub flags: u8,
    pub features: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    pub labels: Option<Vec<i32>>,
    pub weights: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8], String> {
        let end = self.at + len;
        if end > self.bytes.len() {
            return Err(format!("short read at byte {}", self.at));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from(b[0]) | u32::from(b[1]) << 8 | u32::from(b[2]) << 16 | u32::from(b[3]) << 24)
    }

    fn f32s(&mut self, count: u32) -> Result<Vec<f32>, String> {
        (0..count).map(|_| self.u32().map(f32::from_bits)).collect()
    }
}

/// Byte-level decoder that shares no code with the library reader.
pub fn decode(bytes: &[u8]) -> Result<Decoded, String> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != b"OODB" {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    let (n, d, k) = (c.u32()?, c.u32()?, c.u32()?);
    let flags = c.take(1)?[0];
    if c.take(7)?.iter().any(|&b| b != 0) {
        return Err("nonzero padding".into());
    }
    let features = c.f32s(n * d)?;
    let logits = if flags & 1 != 0 { Some(c.f32s(n * k)?) } else { None };
    let labels = if flags & 2 != 0 {
        Some((0..n).map(|_| c.u32().map(|v| v as i32)).collect::<Result<_, _>>()?)
    } else {
        None
    };
    let (weights, bias) = if flags & 4 != 0 {
        (Some(c.f32s(k * d)?), Some(c.f32s(k)?))
    } else {
        (None, None)
    };
    if c.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.at));
    }
    Ok(Decoded {
        version,
        n,
        d,
        k,
        flags,
        features,
        logits,
        labels,
        weights,
        bias,
    })
}

pub struct Golden {
    pub file: &'static str,
    pub expected: Decoded,
}

/// The three checked-in banks and the field values they must decode to.
pub fn goldens() -> Vec<Golden> {
    vec![
        Golden {
            file: "minimal.oodb",
            expected: Decoded {
                version: 1,
                n: 1,
                d: 2,
                k: 2,
                flags: 0,
                features: vec![1.0, 0.0],
                logits: None,
                labels: None,
                weights: None,
                bias: None,
            },
        },
        Golden {
            file: "labelled.oodb",
            expected: Decoded {
                version: 1,
                n: 3,
                d: 2,
                k: 3,
                flags: 3,
                features: vec![0.5, -1.25, 2.0, 0.0, -3.5, 4.0],
                logits: Some(vec![1.0, 0.0, -1.0, 0.25, 0.5, 0.75, -2.0, 8.0, 0.0]),
                labels: Some(vec![0, 2, 1]),
                weights: None,
                bias: None,
            },
        },
        Golden {
            file: "full.oodb",
            expected: Decoded {
                version: 1,
                n: 2,
                d: 3,
                k: 2,
                flags: 7,
                features: vec![1.0, 2.0, 3.0, -0.5, 0.1, 0.0],
                logits: Some(vec![0.5, -0.5, 1.5, 2.5]),
                labels: Some(vec![1, 0]),
                weights: Some(vec![1.0, 0.0, -1.0, 0.5, 0.25, 2.0]),
                bias: Some(vec![0.5, -1.0]),
            },
        },
    ]
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Library-side bank and head holding the decoded values.
pub fn to_bank(g: &Decoded) -> (FeatureBank, Option<ClassifierHead>) {
    let bank = FeatureBank::new(
        g.d as usize,
        g.k as usize,
        widen(&g.features),
        g.logits.as_deref().map(widen),
        g.labels.as_ref().map(|l| l.iter().map(|&x| x as u32).collect()),
    )
    .expect("golden bank is valid");
    let head = g.weights.as_ref().map(|w| {
        ClassifierHead::new(g.k as usize, g.d as usize, widen(w), widen(g.bias.as_ref().unwrap()))
            .expect("golden head is valid")
    });
    (bank, head)
}
