use std::path::Path;

use super::Dataset;
use crate::numerics::Matrix;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::TruncatedFile(format!("{}: header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::TruncatedFile(format!("{}: size overflow", self.what)))?;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::TruncatedFile(format!(
                "{}: need {} payload bytes, have {}",
                self.what,
                n,
                self.bytes.len().saturating_sub(self.pos)
            ))
        })?;
        self.pos = end;
        Ok(chunk)
    }
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX3 unsigned-byte image file into an `n × (rows·cols)` matrix
/// scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "images",
    };
    check_magic(cur.u32_be()?, IMAGES_MAGIC)?;
    let n = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let pixels = cur.take(n * rows * cols)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::from_vec(n, rows * cols, data)
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "labels",
    };
    check_magic(cur.u32_be()?, LABELS_MAGIC)?;
    let n = cur.u32_be()? as usize;
    Ok(cur.take(n)?.iter().map(|&b| b as usize).collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_idx_images(&std::fs::read(path)?)
}

/// Loads an image/label IDX pair. The class count is `max label + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let inputs = load_idx_images(images_path)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if inputs.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.rows(),
            labels: labels.len(),
        });
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, class_count)
}

pub fn encode_idx_images(pixels: &[u8], n: u32, rows: u32, cols: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a dataset whose inputs already lie on the 1/255 grid in `[0, 1]`
/// as an IDX pair with images shaped `1 × input_dim`.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let mut pixels = Vec::with_capacity(dataset.inputs.data().len());
    for &v in dataset.inputs.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "input {v} outside [0, 1] cannot be stored as IDX"
            )));
        }
        pixels.push((v * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(dataset.len());
    for &l in &dataset.labels {
        labels
            .push(u8::try_from(l).map_err(|_| {
                Error::InvalidArgument(format!("label {l} does not fit in a byte"))
            })?);
    }
    std::fs::write(
        images_path,
        encode_idx_images(&pixels, dataset.len() as u32, 1, dataset.input_dim() as u32),
    )?;
    std::fs::write(labels_path, encode_idx_labels(&labels))?;
    Ok(())
}
