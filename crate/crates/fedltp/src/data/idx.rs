//! IDX container format (the MNIST file layout).
//!
//! Images: big-endian magic `0x00000803`, then `count`, `rows`, `cols` as
//! big-endian u32, then `count * rows * cols` unsigned bytes. Labels:
//! magic `0x00000801`, then `count`, then `count` unsigned bytes. Parse
//! errors carry the byte offset of the problem.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated: need {end} bytes for a u32 at offset {offset}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parsed image file: pixel rows flattened to `[0, 1]` floats.
#[derive(Debug)]
pub struct IdxImages {
    pub pixels: Matrix,
    pub rows: usize,
    pub cols: usize,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let per_image = rows.checked_mul(cols).ok_or_else(|| Error::Format {
        offset: 8,
        message: "image dimensions overflow".into(),
    })?;
    let need = per_image.checked_mul(count).ok_or_else(|| Error::Format {
        offset: 4,
        message: "pixel count overflows".into(),
    })?;
    let expected = 16usize.checked_add(need).ok_or_else(|| Error::Format {
        offset: 4,
        message: "file size overflows".into(),
    })?;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated pixel data: need {expected} bytes"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected,
            message: "trailing data after pixels".into(),
        });
    }
    let mut data = Vec::with_capacity(need);
    for &b in &bytes[16..] {
        data.push(b as f64 / 255.0);
    }
    Ok(IdxImages {
        pixels: Matrix::from_vec(count, per_image, data)?,
        rows,
        cols,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let expected = 8usize.checked_add(count).ok_or_else(|| Error::Format {
        offset: 4,
        message: "file size overflows".into(),
    })?;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated label data: need {expected} bytes"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected,
            message: "trailing data after labels".into(),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(pixels: &[u8], count: usize, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image/label IDX pair into a [`Dataset`]. `class_count` defaults
/// to `max label + 1` when not given.
pub fn load_idx_dataset(
    image_bytes: &[u8],
    label_bytes: &[u8],
    class_count: Option<usize>,
) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.pixels.rows() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "{} images but {} labels",
                images.pixels.rows(),
                labels.len()
            ),
        });
    }
    let labels: Vec<u32> = labels.into_iter().map(u32::from).collect();
    let classes =
        class_count.unwrap_or_else(|| labels.iter().copied().max().map_or(1, |m| m as usize + 1));
    Dataset::new(images.pixels, labels, classes)
}

pub fn load_idx_files(
    image_path: &std::path::Path,
    label_path: &std::path::Path,
    class_count: Option<usize>,
) -> Result<Dataset> {
    let images =
        std::fs::read(image_path).map_err(|e| Error::io(image_path.display().to_string(), e))?;
    let labels =
        std::fs::read(label_path).map_err(|e| Error::io(label_path.display().to_string(), e))?;
    load_idx_dataset(&images, &labels, class_count)
}
