//! IDX (MNIST-style) reader.
//!
//! Images and labels live in separate files:
//!
//! ```text
//! images: 00 00 08 03 | n u32be | rows u32be | cols u32be | n·rows·cols u8
//! labels: 00 00 08 01 | n u32be | n u8
//! ```
//!
//! Pixels are scaled to [0, 1]. Any dimension count ≥ 2 is accepted for the
//! image file; trailing dimensions are flattened.

use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{LabelEncoding, LabeledDataset};

const DTYPE_U8: u8 = 0x08;

/// Load an IDX image/label file pair into a (clean) dataset. The number of
/// classes is `max(label) + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (inputs, n, d) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if labels.len() != n {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!("label count {} does not match image count {n}", labels.len()),
        });
    }
    let num_classes = labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    LabeledDataset::new(
        inputs,
        n,
        d,
        labels.clone(),
        labels,
        LabelEncoding::ClassIndex { num_classes },
    )
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn parse_idx_header(bytes: &[u8], path: &Path) -> Result<(usize, Vec<usize>)> {
    if bytes.len() < 4 {
        return Err(parse_err(path, bytes.len() as u64, "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(path, 0, format!(
            "bad magic: bytes 0-1 must be zero, got {:#04x} {:#04x}",
            bytes[0], bytes[1]
        )));
    }
    if bytes[2] != DTYPE_U8 {
        return Err(parse_err(path, 2, format!(
            "unsupported dtype {:#04x} (only unsigned byte {DTYPE_U8:#04x} is supported)",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_err(path, 3, "dimension count is zero"));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(parse_err(path, bytes.len() as u64, format!(
            "truncated header: need {header_len} bytes for {ndims} dimensions"
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        let off = 4 + 4 * k;
        let v = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap());
        dims.push(v as usize);
    }
    Ok((header_len, dims))
}

/// Parse an image file into `(flat inputs, n, d)` with pixels in [0, 1].
pub(crate) fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let (header_len, dims) = parse_idx_header(bytes, path)?;
    if dims.len() < 2 {
        return Err(parse_err(path, 3, format!(
            "image file needs ≥ 2 dimensions, got {}",
            dims.len()
        )));
    }
    let n = dims[0];
    let d: usize = dims[1..].iter().product();
    let expected = header_len + n * d;
    if bytes.len() != expected {
        return Err(parse_err(path, bytes.len().min(expected) as u64, format!(
            "payload size mismatch: expected {expected} bytes total, got {}",
            bytes.len()
        )));
    }
    let inputs = bytes[header_len..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((inputs, n, d))
}

pub(crate) fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<i64>> {
    let (header_len, dims) = parse_idx_header(bytes, path)?;
    if dims.len() != 1 {
        return Err(parse_err(path, 3, format!(
            "label file needs exactly 1 dimension, got {}",
            dims.len()
        )));
    }
    let n = dims[0];
    let expected = header_len + n;
    if bytes.len() != expected {
        return Err(parse_err(path, bytes.len().min(expected) as u64, format!(
            "payload size mismatch: expected {expected} bytes total, got {}",
            bytes.len()
        )));
    }
    Ok(bytes[header_len..].iter().map(|&b| b as i64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("test.idx")
    }

    fn image_file(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = vec![0, 0, DTYPE_U8, 3];
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend(std::iter::repeat(fill).take((n * rows * cols) as usize));
        b
    }

    #[test]
    fn parses_mnist_shaped_file() {
        let bytes = image_file(10, 28, 28, 255);
        let (inputs, n, d) = parse_idx_images(&bytes, &p()).unwrap();
        assert_eq!((n, d), (10, 784));
        assert_eq!(inputs.len(), 7840);
        assert!(inputs.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_magic_with_offset() {
        let mut bytes = image_file(1, 2, 2, 0);
        bytes[0] = 7;
        match parse_idx_images(&bytes, &p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bytes = image_file(1, 2, 2, 0);
        bytes[2] = 0x0D; // float dtype unsupported
        match parse_idx_images(&bytes, &p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncation() {
        let mut bytes = image_file(4, 3, 3, 9);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            parse_idx_images(&bytes, &p()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn label_file_roundtrip() {
        let mut b = vec![0, 0, DTYPE_U8, 1];
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 2]);
        assert_eq!(parse_idx_labels(&b, &p()).unwrap(), vec![7, 0, 2]);
    }
}
