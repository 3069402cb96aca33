//! IDX image/label files (the MNIST container format).
//!
//! Images: magic `0x00000803`, then `n`, `rows`, `cols` as big-endian `u32`,
//! then `n·rows·cols` unsigned bytes. Labels: magic `0x00000801`, `n`, then
//! `n` bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::transforms::{features_matrix, Image};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim("dataset labels", images.len(), labels.len()));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Rows `start..end` (clamped to the dataset length) under a new split.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            split,
        }
    }

    /// Rows `rows` in the given order. Panics on an out-of-range row.
    pub fn select(&self, rows: &[usize], split: Split) -> Dataset {
        Dataset {
            images: rows.iter().map(|&r| self.images[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            split,
        }
    }

    pub fn features(&self) -> Result<Matrix> {
        features_matrix(&self.images)
    }

    /// Fails if any label is `>= classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(l) => Err(Error::Input(format!("label {l} outside [0, {classes})"))),
            None => Ok(()),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file into `(rows, cols, pixel bytes per image)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    if bytes.len() < 16 {
        return Err(Error::format(path, format!("image file too short ({} bytes)", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if n == 0 {
        return Err(Error::format(path, "empty dataset (n = 0)"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, format!("degenerate image size {rows}x{cols}")));
    }
    let size = rows * cols;
    if bytes.len() != 16 + n * size {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {n} images of {rows}x{cols}, found {}", 16 + n * size, bytes.len()),
        ));
    }
    Ok((rows, cols, bytes[16..].chunks_exact(size).map(<[u8]>::to_vec).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(Error::format(path, format!("label file too short ({} bytes)", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if n == 0 {
        return Err(Error::format(path, "empty dataset (n = 0)"));
    }
    if bytes.len() != 8 + n {
        return Err(Error::format(path, format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len())));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file as grayscale images.
pub fn load_idx_images(path: &Path) -> Result<Vec<Image>> {
    let (rows, cols, raw) = parse_idx_images(&read(path)?, path)?;
    raw.iter().map(|px| Image::from_bytes(rows, cols, 1, px)).collect()
}

/// Loads an IDX image/label pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = load_idx_images(images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if labels.len() != images.len() {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images in {}", labels.len(), images.len(), images_path.display()),
        ));
    }
    Dataset::new(images, labels, split)
}

pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("cannot write an empty IDX image file".into()))?;
    let (rows, cols) = (first.height(), first.width());
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if (img.height(), img.width(), img.channels()) != (rows, cols, 1) {
            return Err(Error::Input("IDX image files hold equally sized grayscale images".into()));
        }
        out.extend(img.to_bytes());
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    if labels.is_empty() {
        return Err(Error::Input("cannot write an empty IDX label file".into()));
    }
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

pub fn write_idx(images_path: &Path, labels_path: &Path, images: &[Image], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::dim("IDX labels", images.len(), labels.len()));
    }
    fs::write(images_path, encode_idx_images(images)?).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(labels)?).map_err(|e| Error::io(labels_path, e))
}
