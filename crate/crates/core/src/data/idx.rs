use std::path::Path;

use super::DataError;
use crate::io::write_atomic;

const IMAGES: u32 = 0x0000_0803;
const LABELS: u32 = 0x0000_0801;

/// Parsed contents of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum Idx {
    Images { count: usize, height: usize, width: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

pub fn read_idx(path: &Path) -> Result<Idx, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_idx(&bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { expected: at + 4, actual: bytes.len() })
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx, DataError> {
    let magic = be_u32(bytes, 0)?;
    let rank = match magic {
        IMAGES => 3,
        LABELS => 1,
        found => return Err(DataError::BadMagic { found }),
    };
    let dims: Vec<u32> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i)).collect::<Result<_, _>>()?;
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| DataError::DimOverflow(dims.clone()))?;
    let header = 4 + 4 * rank;
    let expected = header.checked_add(payload).ok_or_else(|| DataError::DimOverflow(dims.clone()))?;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, actual: bytes.len() });
    }
    let data = bytes[header..expected].to_vec();
    Ok(match rank {
        3 => Idx::Images {
            count: dims[0] as usize,
            height: dims[1] as usize,
            width: dims[2] as usize,
            pixels: data,
        },
        _ => Idx::Labels(data),
    })
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn write_idx_images(
    path: &Path,
    count: usize,
    height: usize,
    width: usize,
    pixels: &[u8],
) -> Result<(), DataError> {
    if pixels.len() != count * height * width {
        return Err(DataError::Inconsistent(format!(
            "{} pixels for {count} images of {height}x{width}",
            pixels.len()
        )));
    }
    let mut bytes = header(IMAGES, &[count, height, width]);
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes).map_err(|e| DataError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = header(LABELS, &[labels.len()]);
    bytes.extend_from_slice(labels);
    write_atomic(path, &bytes).map_err(|e| DataError::io(path, e))
}
