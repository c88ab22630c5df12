//! IDX (MNIST-style) unsigned-byte image and label files.
//!
//! Images: big-endian `0x00000803`, count, rows, cols, then `count*rows*cols`
//! bytes. Labels: big-endian `0x00000801`, count, then `count` bytes.
//! Pixels are scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, "truncated header"))
}

/// Decodes an image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if count == 0 {
        return Err(format_err(4, "image file holds zero items"));
    }
    if rows == 0 || cols == 0 {
        return Err(format_err(8, "zero image dimension"));
    }
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(format_err(
            16 + body.len().min(expected),
            format!("expected {expected} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((count, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    if count == 0 {
        return Err(format_err(4, "label file holds zero items"));
    }
    let body = &bytes[8..];
    if body.len() != count {
        return Err(format_err(
            8 + body.len().min(count),
            format!("expected {count} label bytes, found {}", body.len()),
        ));
    }
    Ok(body)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label pair as `[1, rows, cols]` samples. The class count
/// defaults to `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let image_bytes = read(images_path.as_ref())?;
    let label_bytes = read(labels_path.as_ref())?;
    decode(&image_bytes, &label_bytes, num_classes)
}

pub(crate) fn decode(image_bytes: &[u8], label_bytes: &[u8], num_classes: Option<usize>) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(format_err(
            4,
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let inputs = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    LabeledDataset::new(vec![1, rows, cols], inputs, labels, c)
}

pub(crate) fn encode(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match *ds.sample_shape() {
        [1, r, c] => (r, c),
        [r, c] => (r, c),
        [d] => (1, d),
        ref s => return Err(Error::shape(format!("cannot store sample shape {s:?} as IDX"))),
    };
    if ds.is_empty() {
        return Err(Error::domain("cannot write an empty IDX file"));
    }
    if ds.num_classes() > 256 {
        return Err(Error::domain("IDX labels are single bytes"));
    }
    let mut images = Vec::with_capacity(16 + ds.inputs().len());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), rows, cols] {
        images.extend((d as u32).to_be_bytes());
    }
    images.extend(ds.inputs().iter().map(|v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// Writes a dataset as IDX files. Values are quantized to multiples of
/// 1/255, so datasets already on that grid round-trip exactly.
pub fn write_idx(ds: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode(ds)?;
    fs::write(images_path.as_ref(), images).map_err(|e| Error::io(images_path.as_ref(), e))?;
    fs::write(labels_path.as_ref(), labels).map_err(|e| Error::io(labels_path.as_ref(), e))
}
