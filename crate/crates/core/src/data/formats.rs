//! Raw distribution formats: IDX (MNIST) and the CIFAR-10 binary batches.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// 8-bit images stored `[N, C, H, W]` with one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::Data(format!(
                "{} pixel bytes for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(LabeledImages { channels, height, width, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: (at + 4) as u64,
            actual: bytes.len() as u64,
        })
}

fn expect_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after {expected}", bytes.len() - expected),
        ));
    }
    Ok(())
}

/// IDX image file: magic `0x00000803`, then big-endian count, rows, cols.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(path, format!("bad IDX image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, format!("degenerate image dimensions {rows}x{cols}")));
    }
    expect_len(&bytes, 16 + n * rows * cols, path)?;
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// IDX label file: magic `0x00000801`, then big-endian count.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(path, format!("bad IDX label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    expect_len(&bytes, 8 + n, path)?;
    Ok(bytes[8..].to_vec())
}

/// A grayscale IDX image file together with its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledImages> {
    let (n, rows, cols, pixels) = load_idx_images(images)?;
    let labels_v = load_idx_labels(labels)?;
    if labels_v.len() != n {
        return Err(Error::Data(format!(
            "cannot pair {} labels in {} with {n} images in {}",
            labels_v.len(),
            labels.display(),
            images.display()
        )));
    }
    LabeledImages::new(1, rows, cols, pixels, labels_v)
}

/// CIFAR-10 binary batch: 3073-byte records of one label byte then 3x32x32 CHW pixels.
pub fn load_cifar_binary(path: &Path) -> Result<LabeledImages> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    LabeledImages::new(3, 32, 32, pixels, labels)
}

/// Concatenate image sets of identical geometry (e.g. the five CIFAR training batches).
pub fn concat(sets: Vec<LabeledImages>) -> Result<LabeledImages> {
    let mut iter = sets.into_iter();
    let mut first = iter.next().ok_or_else(|| Error::Data("no image sets to concatenate".into()))?;
    for s in iter {
        if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
            return Err(Error::Data("cannot concatenate image sets of different geometry".into()));
        }
        first.pixels.extend(s.pixels);
        first.labels.extend(s.labels);
    }
    Ok(first)
}

/// Encode an image set as an IDX image file followed by its label file.
pub fn encode_idx(set: &LabeledImages) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + set.pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [set.len(), set.height, set.width] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend_from_slice(&set.pixels);
    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lab.extend_from_slice(&set.labels);
    (img, lab)
}

/// Encode a 3x32x32 image set in CIFAR-10 binary layout.
pub fn encode_cifar(set: &LabeledImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        out.push(set.labels[i]);
        out.extend_from_slice(set.image(i));
    }
    out
}
