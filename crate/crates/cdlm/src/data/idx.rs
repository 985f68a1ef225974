//! IDX file reader (the MNIST-family container format). Big-endian headers,
//! magic 0x00000803 for images and 0x00000801 for labels.

use std::fs;
use std::path::Path;

use super::DomainBatch;
use crate::error::{CdlmError, Result};
use crate::num::Scalar;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| CdlmError::Format {
        path: path.to_string(),
        offset: offset as u64,
        detail: "truncated header".into(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parse an IDX image header: returns (count, rows, cols).
pub fn parse_idx_image_header(bytes: &[u8], path: &str) -> Result<(usize, usize, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(CdlmError::Format {
            path: path.to_string(),
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    Ok((count, rows, cols))
}

/// Parse an IDX label header: returns the label count.
pub fn parse_idx_label_header(bytes: &[u8], path: &str) -> Result<usize> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(CdlmError::Format {
            path: path.to_string(),
            offset: 0,
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
        });
    }
    Ok(be_u32(bytes, 4, path)? as usize)
}

/// Load a paired IDX image/label file into a grayscale batch with pixels
/// scaled to [0, 1].
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<DomainBatch<T>> {
    let ipath = images_path.as_ref().display().to_string();
    let lpath = labels_path.as_ref().display().to_string();
    let ibytes = fs::read(images_path.as_ref()).map_err(|e| CdlmError::io(&ipath, e))?;
    let lbytes = fs::read(labels_path.as_ref()).map_err(|e| CdlmError::io(&lpath, e))?;

    let (count, rows, cols) = parse_idx_image_header(&ibytes, &ipath)?;
    let expected = 16 + count * rows * cols;
    if ibytes.len() < expected {
        return Err(CdlmError::Format {
            path: ipath,
            offset: ibytes.len() as u64,
            detail: format!("truncated pixel data: have {} bytes, need {expected}", ibytes.len()),
        });
    }

    let lcount = parse_idx_label_header(&lbytes, &lpath)?;
    if lcount != count {
        return Err(CdlmError::Format {
            path: lpath,
            offset: 4,
            detail: format!("label count {lcount} does not match image count {count}"),
        });
    }
    let lexpected = 8 + lcount;
    if lbytes.len() < lexpected {
        return Err(CdlmError::Format {
            path: lpath,
            offset: lbytes.len() as u64,
            detail: format!("truncated labels: have {} bytes, need {lexpected}", lbytes.len()),
        });
    }

    let scale = 1.0 / 255.0;
    let images: Vec<T> = ibytes[16..expected]
        .iter()
        .map(|&b| T::from_f64_c(b as f64 * scale))
        .collect();
    let labels: Vec<u8> = lbytes[8..lexpected].to_vec();
    DomainBatch::new(images, count, 1, rows, cols, Some(labels))
}

/// Serialize a grayscale batch back into a pair of IDX byte buffers.
pub fn to_idx_bytes<T: Scalar>(batch: &DomainBatch<T>) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + batch.images.len());
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(batch.n as u32).to_be_bytes());
    images.extend_from_slice(&(batch.height as u32).to_be_bytes());
    images.extend_from_slice(&(batch.width as u32).to_be_bytes());
    for &p in &batch.images {
        images.push((p.to_f64_c() * 255.0).round() as u8);
    }
    let mut labels = Vec::new();
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(batch.n as u32).to_be_bytes());
    if let Some(l) = &batch.labels {
        labels.extend_from_slice(l);
    } else {
        labels.extend(std::iter::repeat(0u8).take(batch.n));
    }
    (images, labels)
}
