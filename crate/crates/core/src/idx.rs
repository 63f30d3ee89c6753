//! IDX image and label files (big-endian header, unsigned-byte payload).

use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    /// Flattened row-major images scaled to `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `(count, rows, cols)`.
    pub dims: (usize, usize, usize),
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| fmt_err(bytes.len(), "truncated header"))
}

pub fn parse_images(bytes: &[u8]) -> Result<(Vec<Vec<f64>>, (usize, usize, usize))> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(fmt_err(0, format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let need = 16 + n * size;
    if bytes.len() < need {
        return Err(fmt_err(bytes.len(), format!("expected {need} bytes of image data")));
    }
    let images = bytes[16..need]
        .chunks_exact(size.max(1))
        .take(n)
        .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((images, (n, rows, cols)))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(fmt_err(0, format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = bytes
        .get(8..8 + n)
        .ok_or_else(|| fmt_err(bytes.len(), format!("expected {n} labels")))?;
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxDataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (imgs, dims) = parse_images(&ib)?;
    let labs = parse_labels(&lb)?;
    if labs.len() != imgs.len() {
        return Err(fmt_err(
            4,
            format!("{} labels for {} images", labs.len(), imgs.len()),
        ));
    }
    Ok(IdxDataset {
        images: imgs,
        labels: labs,
        dims,
    })
}

/// Serializes images (values in `[0, 1]`, rounded to bytes) in IDX form.
pub fn encode_images(images: &[Vec<f64>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
