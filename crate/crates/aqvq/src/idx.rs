//! IDX files (the MNIST container): a big-endian magic `0x0000TTNN` with
//! element type `TT` and dimension count `NN`, `NN` big-endian u32 extents,
//! then the raw elements.

use std::path::Path;

use aqvq_core::data::Dataset;

use crate::error::{AppError, AppResult};

const UBYTE: u8 = 0x08;

/// Parsed unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], context: &str) -> AppResult<IdxArray> {
    let err = |m: String| AppError::format(context, m);
    if bytes.len() < 4 {
        return Err(err(format!("file too short for a magic number: {} bytes", bytes.len())));
    }
    let magic = &bytes[..4];
    if magic[0] != 0 || magic[1] != 0 || magic[2] != UBYTE || magic[3] == 0 {
        return Err(err(format!("bad magic {:02x?}, expected 00 00 08 NN", magic)));
    }
    let ndims = magic[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(err(format!("truncated header: expected {header} bytes, got {}", bytes.len())));
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| err(format!("extents {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(err(format!("expected {expected} bytes for extents {dims:?}, got {}", bytes.len())));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

fn read(path: &Path) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| AppError::MissingInput { path: path.into(), source })
}

/// Loads an image file (3 dimensions) with optional labels (1 dimension).
/// Pixels are scaled to `[0, 1]`; samples have shape `[1, rows, cols]`.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> AppResult<Dataset> {
    let ctx = images.display().to_string();
    let img = parse_idx(&read(images)?, &ctx)?;
    if img.dims.len() != 3 {
        return Err(AppError::format(ctx, format!("image file needs 3 dimensions, got {:?}", img.dims)));
    }
    if img.dims.contains(&0) {
        return Err(AppError::format(ctx, "image file holds no pixels"));
    }
    let pixels = img.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let data = Dataset::new(&[1, img.dims[1], img.dims[2]], pixels)?;
    match labels {
        None => Ok(data),
        Some(path) => {
            let ctx = path.display().to_string();
            let lab = parse_idx(&read(path)?, &ctx)?;
            if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
                return Err(AppError::format(
                    ctx,
                    format!("label file needs one extent of {}, got {:?}", img.dims[0], lab.dims),
                ));
            }
            Ok(data.with_labels(lab.data.iter().map(|&b| u32::from(b)).collect())?)
        }
    }
}
