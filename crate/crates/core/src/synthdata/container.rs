//! Flat binary dataset container ("SNLD").
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  4 bytes  "SNLD"
//! version u32     currently 1
//! n       u64
//! d       u64
//! k       u32     number of classes
//! inputs  n·d f64 row-major
//! observed n i64
//! true     n i64
//! ```
//!
//! The clean mask is derived on load. For k == 2 the label convention is
//! sniffed from the values: any negative label means signed ±1 binary,
//! otherwise class indices {0, 1}.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{LabelEncoding, LabeledDataset};

const MAGIC: &[u8; 4] = b"SNLD";
const VERSION: u32 = 1;

pub fn write_snld(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ds.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ds.dim() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ds.num_classes() as u32).to_le_bytes())
        .map_err(io_err)?;
    for &v in ds.inputs_flat() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for &t in ds.observed_all() {
        w.write_all(&t.to_le_bytes()).map_err(io_err)?;
    }
    for &t in ds.truth_all() {
        w.write_all(&t.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_snld(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
        path,
    };

    let magic = r.bytes::<4>("magic")?;
    if &magic != MAGIC {
        return Err(r.err_at(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = u32::from_le_bytes(r.bytes::<4>("version")?);
    if version != VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(r.bytes::<8>("n")?) as usize;
    let d = u64::from_le_bytes(r.bytes::<8>("d")?) as usize;
    let k = u32::from_le_bytes(r.bytes::<4>("k")?) as usize;
    if k < 2 {
        return Err(r.err_at(24, format!("class count {k} must be ≥ 2")));
    }

    let mut inputs = vec![0.0f64; n * d];
    for v in inputs.iter_mut() {
        *v = f64::from_le_bytes(r.bytes::<8>("inputs")?);
    }
    let mut observed = vec![0i64; n];
    for t in observed.iter_mut() {
        *t = i64::from_le_bytes(r.bytes::<8>("observed targets")?);
    }
    let mut truth = vec![0i64; n];
    for t in truth.iter_mut() {
        *t = i64::from_le_bytes(r.bytes::<8>("true targets")?);
    }

    let signed = k == 2
        && observed
            .iter()
            .chain(truth.iter())
            .any(|&t| t < 0);
    let encoding = if signed {
        LabelEncoding::SignedBinary
    } else {
        LabelEncoding::ClassIndex { num_classes: k }
    };
    LabeledDataset::new(inputs, n, d, observed, truth, encoding)
}

struct Reader<'a, R: Read> {
    inner: R,
    offset: u64,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset,
            msg: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn err_at(&self, offset: u64, msg: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg,
        }
    }
}
