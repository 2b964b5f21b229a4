//! CIFAR-10 binary batch reader.
//!
//! Each record is `1 label byte + 3072 pixel bytes` (32×32, R/G/B planes).
//! Pixels are scaled to [0, 1]; with `normalize` set, each channel is
//! standardized with the usual CIFAR-10 statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{LabelEncoding, LabeledDataset};

pub const CIFAR_CHANNEL_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_CHANNEL_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];

const RECORD_LEN: usize = 1 + 3072;
const PLANE: usize = 1024;

pub fn load_cifar_binary(path: &Path, normalize: bool) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD_LEN) as u64,
            msg: format!(
                "file length {} is not a positive multiple of the {RECORD_LEN}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut inputs = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * RECORD_LEN..(r + 1) * RECORD_LEN];
        let label = rec[0] as i64;
        if label > 9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (r * RECORD_LEN) as u64,
                msg: format!("label byte {label} out of range 0..=9"),
            });
        }
        labels.push(label);
        for (i, &b) in rec[1..].iter().enumerate() {
            let channel = i / PLANE;
            let mut v = b as f64 / 255.0;
            if normalize {
                v = normalize_channel(v, channel);
            }
            inputs.push(v);
        }
    }
    LabeledDataset::new(
        inputs,
        n,
        3072,
        labels.clone(),
        labels,
        LabelEncoding::ClassIndex { num_classes: 10 },
    )
}

/// `(v − mean_c) / std_c` for channel `c ∈ {0,1,2}`.
pub fn normalize_channel(v: f64, channel: usize) -> f64 {
    (v - CIFAR_CHANNEL_MEAN[channel]) / CIFAR_CHANNEL_STD[channel]
}
