use std::path::Path;

use super::{DataError, ImageDataset};

const RECORD: usize = 1 + 3 * 32 * 32;

/// Reads a CIFAR-10 binary batch: records of one label byte followed by
/// planar R, G, B 32×32 planes. Pixels are stored interleaved (HWC).
pub fn read_cifar_batch(path: &Path) -> Result<ImageDataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        let n = bytes.len() / RECORD + 1;
        return Err(DataError::Truncated { expected: n * RECORD, actual: bytes.len() });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (RECORD - 1));
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                images.push(planes[c * 1024 + p]);
            }
        }
    }
    ImageDataset::new(images, labels, (32, 32, 3), 256, 10)
}
