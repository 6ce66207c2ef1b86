//! IDX container files as used by the MNIST distribution.

use std::path::Path;

use super::problems::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Decode(format!("IDX header truncated at byte {at}")))
}

/// Parses an unsigned-byte IDX file with the given magic number.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Decode(format!("IDX magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|x| x as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Decode(format!("IDX body holds {} of {len} bytes", bytes.len().saturating_sub(start))))?;
    Ok(IdxArray {
        dims,
        data: data.to_vec(),
    })
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxArray> {
    parse_idx(bytes, IMAGES_MAGIC)
}

pub fn parse_labels(bytes: &[u8]) -> Result<IdxArray> {
    parse_idx(bytes, LABELS_MAGIC)
}

/// Pixels scaled to `[0, 1]`, labels as classes `0..10`.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Dataset> {
    if images.dims.first() != labels.dims.first() {
        return Err(Error::Decode(format!(
            "{:?} images but {:?} labels",
            images.dims.first(),
            labels.dims.first()
        )));
    }
    let dim = images.dims[1..].iter().product();
    let features = images.data.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = labels.data.iter().map(|&l| l as usize).collect();
    Dataset::new(features, dim, labels, 10).map_err(|e| Error::Decode(e.to_string()))
}

/// Loads `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let images = parse_images(&std::fs::read(dir.join("train-images-idx3-ubyte"))?)?;
    let labels = parse_labels(&std::fs::read(dir.join("train-labels-idx1-ubyte"))?)?;
    dataset_from_idx(&images, &labels)
}
