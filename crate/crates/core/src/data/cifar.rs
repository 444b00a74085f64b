//! CIFAR-10 binary batches.
//!
//! Each record is 3073 bytes: one label byte followed by 3072 pixel bytes
//! stored channel-planar (all red, then green, then blue), each plane 32x32
//! row-major. Pixels map to `[-1, 1]` through `v / 127.5 - 1`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_LEN: usize = CIFAR_PIXELS + 1;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Box<[u8; CIFAR_PIXELS]>,
}

impl std::fmt::Debug for CifarRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CifarRecord")
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    pub fn files(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarScale {
    /// 3 x 32 x 32.
    Full,
    /// 3 x 8 x 8 by 4x4 block averaging.
    Down8,
}

impl CifarScale {
    pub fn side(self) -> usize {
        match self {
            CifarScale::Full => CIFAR_SIDE,
            CifarScale::Down8 => 8,
        }
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Data(format!(
            "cifar batch length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(Error::Data(format!("record {i} has label byte {label}")));
            }
            let mut pixels = Box::new([0u8; CIFAR_PIXELS]);
            pixels.copy_from_slice(&rec[1..]);
            Ok(CifarRecord { label, pixels })
        })
        .collect()
}

pub fn serialize_cifar10(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_LEN);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels[..]);
    }
    out
}

/// Averages non-overlapping `factor x factor` blocks of a `[C, S, S]` image.
pub fn downscale_block_average(img: &[f64], channels: usize, side: usize, factor: usize) -> Vec<f64> {
    let out_side = side / factor;
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; channels * out_side * out_side];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                out[(c * out_side + y / factor) * out_side + x / factor] += img[(c * side + y) * side + x] * norm;
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    out
}

pub fn record_to_tensor(r: &CifarRecord, scale: CifarScale) -> Tensor {
    let full: Vec<f64> = r.pixels.iter().map(|&v| f64::from(v) / 127.5 - 1.0).collect();
    match scale {
        CifarScale::Full => Tensor::vector(full),
        CifarScale::Down8 => Tensor::vector(downscale_block_average(&full, 3, CIFAR_SIDE, 4)),
    }
}

pub fn records_to_dataset(records: &[CifarRecord], scale: CifarScale, source: &str) -> Result<Dataset> {
    let inputs = records.iter().map(|r| record_to_tensor(r, scale)).collect();
    let labels = records.iter().map(|r| r.label as usize).collect();
    Dataset::new(inputs, labels, CIFAR_CLASSES, source)
}

/// Loads a split from the standard batch files in `dir`, keeping at most
/// `limit` records.
pub fn load_cifar10(dir: &Path, split: CifarSplit, scale: CifarScale, limit: Option<usize>) -> Result<Dataset> {
    let mut records = Vec::new();
    for name in split.files() {
        if limit.is_some_and(|l| records.len() >= l) {
            break;
        }
        let path = dir.join(&name);
        if !path.is_file() {
            return Err(Error::Data(format!("missing cifar batch file {}", path.display())));
        }
        records.extend(parse_cifar10(&fs::read(&path)?)?);
    }
    if let Some(l) = limit {
        records.truncate(l);
    }
    records_to_dataset(&records, scale, &dir.display().to_string())
}

/// Deterministic CIFAR-format records for offline smoke runs: each class is a
/// distinct colour gradient with per-pixel noise.
pub fn fixture_records(count: usize, seed: u64) -> Vec<CifarRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = (i % CIFAR_CLASSES) as u8;
            let base = [
                40 + 20 * u32::from(label),
                220 - 18 * u32::from(label),
                if label.is_multiple_of(2) { 60 } else { 190 },
            ];
            let mut pixels = Box::new([0u8; CIFAR_PIXELS]);
            for c in 0..3 {
                for y in 0..CIFAR_SIDE {
                    for x in 0..CIFAR_SIDE {
                        let ramp = if (label as usize + c).is_multiple_of(3) { x } else { y } as i32;
                        let noise: i32 = rng.random_range(-20..=20);
                        let v = base[c] as i32 + 2 * ramp - 32 + noise;
                        pixels[(c * CIFAR_SIDE + y) * CIFAR_SIDE + x] = v.clamp(0, 255) as u8;
                    }
                }
            }
            CifarRecord { label, pixels }
        })
        .collect()
}
