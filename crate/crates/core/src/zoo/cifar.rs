//! Bit-exact CIFAR binary loader.
//!
//! CIFAR-10 records are 3073 bytes: 1 label byte then 3072 pixel bytes in
//! plane order R, G, B, each plane row-major 32×32. CIFAR-100 records are
//! 3074 bytes: coarse label, fine label, then the same 3072 pixels; the
//! fine label is used. Pixels load as `byte / 255` in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::zoo::data::Dataset;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decode raw CIFAR bytes. `limit` caps the number of records (taking the
/// first ones); `None` loads everything.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant, limit: Option<usize>) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::format("empty CIFAR file"));
    }
    if bytes.len() % rec != 0 {
        return Err(Error::format(format!(
            "file length {} is not a whole number of {}-byte records (offset {} is mid-record)",
            bytes.len(),
            rec,
            bytes.len() - bytes.len() % rec
        )));
    }
    let total = bytes.len() / rec;
    let n = limit.map_or(total, |l| l.min(total));
    let mut x = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let r = &bytes[i * rec..(i + 1) * rec];
        let label = match variant {
            CifarVariant::Cifar10 => r[0] as usize,
            CifarVariant::Cifar100 => r[1] as usize, // fine label
        };
        if label >= variant.classes() {
            return Err(Error::format(format!(
                "record {i}: label {label} out of range for {:?}",
                variant
            )));
        }
        y.push(label);
        let px = &r[rec - CIFAR_PIXELS..];
        x.extend(px.iter().map(|&b| b as Real / 255.0));
    }
    Dataset::new(CIFAR_PIXELS, variant.classes(), x, y)
}

pub fn load_cifar_binary(
    path: &Path,
    variant: CifarVariant,
    limit: Option<usize>,
) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    decode_cifar(&bytes, variant, limit)
}

/// Re-encode one loaded sample to its original record bytes (the inverse of
/// decoding: `round(v·255)`). For CIFAR-100 the coarse label byte must be
/// supplied since loading discards it.
pub fn encode_cifar_record(
    variant: CifarVariant,
    coarse: u8,
    label: usize,
    pixels: &[Real],
) -> Result<Vec<u8>> {
    if pixels.len() != CIFAR_PIXELS {
        return Err(Error::contract(format!(
            "expected {CIFAR_PIXELS} pixels, got {}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(variant.record_len());
    match variant {
        CifarVariant::Cifar10 => out.push(label as u8),
        CifarVariant::Cifar100 => {
            out.push(coarse);
            out.push(label as u8);
        }
    }
    out.extend(pixels.iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}
