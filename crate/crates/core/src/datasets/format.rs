//! `HZDS` dataset container.
//!
//! Little-endian: magic `HZDS`, version `u32`, sample count `u32`, `C`, `H`,
//! `W` as `u16`, then per sample its id (`u64`), `C*H*W` image values (`f64`)
//! and `H*W` mask bytes.

use std::path::Path;

use super::{Mask, SegmentationSample};
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"HZDS";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 18;

/// Exact byte length of a container holding `count` samples of `[c, h, w]`.
pub fn dataset_file_size(count: usize, c: usize, h: usize, w: usize) -> usize {
    HEADER_BYTES + count * (8 + 8 * c * h * w + h * w)
}

fn encode(samples: &[SegmentationSample]) -> Result<Vec<u8>> {
    ensure!(
        !samples.is_empty(),
        "write_dataset",
        "refusing to write an empty dataset"
    );
    let shape = samples[0].image.shape().to_vec();
    ensure!(
        samples.iter().all(|s| s.image.shape() == shape.as_slice()),
        "write_dataset",
        "all images must share one [C,H,W] shape"
    );
    ensure!(
        shape.iter().all(|&d| d <= u16::MAX as usize) && samples.len() <= u32::MAX as usize,
        "write_dataset",
        "dataset extents exceed the container limits"
    );
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(dataset_file_size(samples.len(), c, h, w));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for s in samples {
        out.extend_from_slice(&s.sample_id.to_le_bytes());
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(s.mask.data());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Vec<SegmentationSample>> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header needs {HEADER_BYTES} bytes"),
        ));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected HZDS"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported dataset version {version}"),
        ));
    }
    let count = u32_at(8) as usize;
    let (c, h, w) = (u16_at(12), u16_at(14), u16_at(16));
    if count == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::format(
            8,
            format!("degenerate header: {count} samples of [{c},{h},{w}]"),
        ));
    }
    let expected = dataset_file_size(count, c, h, w);
    if bytes.len() != expected {
        let offset = bytes.len().min(expected) as u64;
        return Err(Error::format(
            offset,
            format!("header predicts {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let stride = 8 + 8 * c * h * w + h * w;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER_BYTES + i * stride;
        let id = u64::from_le_bytes(bytes[base..base + 8].try_into().expect("8 bytes"));
        let img_at = base + 8;
        let image: Vec<f64> = bytes[img_at..img_at + 8 * c * h * w]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let mask_at = img_at + 8 * c * h * w;
        let mask_bytes = &bytes[mask_at..mask_at + h * w];
        if let Some(p) = mask_bytes.iter().position(|&v| v > 1) {
            return Err(Error::format(
                (mask_at + p) as u64,
                "mask byte is not 0 or 1",
            ));
        }
        let image = Tensor::new(&[c, h, w], image)?;
        samples.push(SegmentationSample::new(
            id,
            image,
            Mask::new(h, w, mask_bytes.to_vec())?,
        )?);
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[SegmentationSample], path: &Path) -> Result<()> {
    let bytes = encode(samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SegmentationSample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
