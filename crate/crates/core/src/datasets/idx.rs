//! IDX (MNIST) binary format: big-endian header, then raw unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{InstancePool, Split};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::Format(format!(
            "{what}: expected magic {expected} (0x{expected:08x}), found {found} (0x{found:08x})"
        )));
    }
    Ok(())
}

/// Parses an images file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC, "images")?;
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Length(format!(
            "images: header declares {count} x {rows} x {cols} = {need} bytes, file has {}",
            body.len()
        )));
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, "labels")?;
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Length(format!(
            "labels: header declares {count} labels, file has {}",
            body.len()
        )));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("labels: class {bad} outside 0..=9")));
    }
    Ok(body.to_vec())
}

pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<InstancePool> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_images(&images)?;
    let labels = parse_labels(&labels)?;
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    InstancePool::new(rows, cols, pixels, labels, split)
}

/// Loads the canonical four-file MNIST layout from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(InstancePool, InstancePool)> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for name in [format!("{stem}-ubyte"), stem.replacen("-idx", ".idx", 1) + "-ubyte"] {
            let p = dir.join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no {stem}-ubyte file", dir.display()),
        )))
    };
    let train = load_mnist_idx(
        find("train-images-idx3")?,
        find("train-labels-idx1")?,
        Split::Train,
    )?;
    let test = load_mnist_idx(find("t10k-images-idx3")?, find("t10k-labels-idx1")?, Split::Test)?;
    Ok((train, test))
}

pub fn encode_images(pool: &InstancePool) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pool.pixels().len());
    for v in [IMAGES_MAGIC, pool.len() as u32, pool.rows() as u32, pool.cols() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pool.pixels());
    out
}

pub fn encode_labels(pool: &InstancePool) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + pool.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(pool.len() as u32).to_be_bytes());
    out.extend_from_slice(pool.labels());
    out
}

pub fn write_idx(pool: &InstancePool, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::File::create(images_path)?.write_all(&encode_images(pool))?;
    fs::File::create(labels_path)?.write_all(&encode_labels(pool))?;
    Ok(())
}
