//! IDX and CIFAR-10 binary readers.

use std::path::Path;

use factornas_core::data::Dataset;
use factornas_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// One label byte followed by 3·32·32 channel-planar pixels.
pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], offset: usize, src: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::format(src, bytes.len() as u64, format!("header ends before byte {}", offset + 4))),
    }
}

fn short_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn check_len(bytes: &[u8], expected: usize, src: &str) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::format(src, bytes.len() as u64, format!("truncated: {expected} bytes expected")));
    }
    if bytes.len() > expected {
        return Err(Error::format(src, expected as u64, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok(())
}

/// IDX image file as `(n, h, w, pixels)`, pixels scaled to `[0,1]`.
pub fn parse_idx_images(bytes: &[u8], src: &str) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, src)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(src, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, src)? as usize;
    let h = be_u32(bytes, 8, src)? as usize;
    let w = be_u32(bytes, 12, src)? as usize;
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::format(src, 4, "dimensions overflow"))?;
    check_len(bytes, total, src)?;
    Ok((n, h, w, bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], src: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, src)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(src, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, src)? as usize;
    check_len(bytes, n + 8, src)?;
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Pairs an IDX image file with its label file. `classes` of 0 means one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (isrc, lsrc) = (images.display().to_string(), labels.display().to_string());
    let ib = io::read(images)?;
    let lb = io::read(labels)?;
    let (n, h, w, pixels) = parse_idx_images(&ib, &isrc)?;
    let ys = parse_idx_labels(&lb, &lsrc)?;
    if ys.len() != n {
        return Err(Error::format(&lsrc, 4, format!("{} labels for {n} images", ys.len())));
    }
    let k = if classes == 0 { ys.iter().max().map_or(0, |m| m + 1) } else { classes };
    if let Some(i) = ys.iter().position(|&y| y >= k) {
        return Err(Error::format(&lsrc, 8 + i as u64, format!("label {} outside {k} classes", ys[i])));
    }
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    Ok(Dataset::new(images, ys, k, &isrc, &format!("sha256:{}", short_digest(&[&ib, &lb])))?)
}

/// Concatenated CIFAR-10 records as `(labels, pixels)`.
pub fn parse_cifar(bytes: &[u8], src: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::format(src, whole as u64, format!("truncated record: {} of {CIFAR_RECORD} bytes", bytes.len() - whole)));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let y = usize::from(rec[0]);
        if y >= CIFAR_CLASSES {
            return Err(Error::format(src, (i * CIFAR_RECORD) as u64, format!("label {y} outside {CIFAR_CLASSES} classes")));
        }
        labels.push(y);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((labels, pixels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_files(files: &[&Path], name: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut hasher = Sha256::new();
    for f in files {
        let bytes = io::read(f)?;
        hasher.update(&bytes);
        let (y, x) = parse_cifar(&bytes, &f.display().to_string())?;
        labels.extend(y);
        pixels.extend(x);
    }
    let digest: String = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Ok(Dataset::new(images, labels, CIFAR_CLASSES, name, &format!("sha256:{digest}"))?)
}

/// The training batches `data_batch_1.bin` … `data_batch_5.bin` under `dir`.
pub fn load_cifar_binary(dir: &Path) -> Result<Dataset> {
    let files: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let refs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
    load_cifar_files(&refs, "cifar10-train")
}

/// `test_batch.bin` under `dir`.
pub fn load_cifar_test(dir: &Path) -> Result<Dataset> {
    load_cifar_files(&[&dir.join("test_batch.bin")], "cifar10-test")
}
