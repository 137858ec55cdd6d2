//! IDX (MNIST-style) image and label files.
//!
//! Headers are big-endian: a 4-byte magic (`00 00 08 ndim`), then `ndim`
//! u32 extents, then unsigned bytes.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    let chunk = bytes.get(offset..end).ok_or(Error::Truncated {
        offset,
        needed: 4,
        available: bytes.len().saturating_sub(offset),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn parse(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "IDX magic {:02x} {:02x} {:02x} {:02x}, expected {magic:#010x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let body_len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("IDX extents {dims:?} overflow")))?;
    let available = bytes.len() - header;
    if available < body_len {
        return Err(Error::Truncated {
            offset: header,
            needed: body_len,
            available,
        });
    }
    if available > body_len {
        return Err(Error::Format(format!(
            "IDX body holds {available} bytes but extents {dims:?} describe {body_len}"
        )));
    }
    Ok((dims, &bytes[header..]))
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let (dims, body) = parse(bytes, IMAGES_MAGIC)?;
    if dims.contains(&0) {
        return Err(Error::Format(format!(
            "IDX image extents must be positive, got {dims:?}"
        )));
    }
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: body.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, body) = parse(bytes, LABELS_MAGIC)?;
    Ok(body.to_vec())
}

/// Serialize in IDX layout (fixtures and tests).
pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Combine parsed images and labels into a `[N, 1, rows, cols]` dataset
/// scaled by `1/255`.
pub fn to_dataset<T: Real>(images: &IdxImages, labels: &[u8], split: Split) -> Result<Dataset<T>> {
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data = images
        .pixels
        .iter()
        .map(|&b| T::from_f64(b as f64) * scale)
        .collect();
    let tensor = Tensor::new(&[images.count, 1, images.rows, images.cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(tensor, labels, classes, split)
}

pub fn load_idx<T: Real>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<T>> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    to_dataset(&parse_images(&img)?, &parse_labels(&lab)?, split)
}
