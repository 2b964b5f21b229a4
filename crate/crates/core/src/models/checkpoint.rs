//! Model checkpoints ("SNLM"): magic, family tag, shape header, then the
//! flat f64 parameters. All integers little-endian.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Activation, Dln2Model, LinearModel, MlpModel, Model};

const MAGIC: &[u8; 4] = b"SNLM";
const VERSION: u32 = 1;

const FAMILY_LINEAR: u32 = 0;
const FAMILY_DLN2: u32 = 1;
const FAMILY_MLP: u32 = 2;

pub fn write_snlm(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    match model {
        Model::Linear(m) => {
            w.write_all(&FAMILY_LINEAR.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(m.weights().len() as u64).to_le_bytes())
                .map_err(io_err)?;
        }
        Model::Dln2(_) => {
            w.write_all(&FAMILY_DLN2.to_le_bytes()).map_err(io_err)?;
            let (h, d) = dln2_shape(model);
            w.write_all(&(h as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        Model::Mlp(m) => {
            w.write_all(&FAMILY_MLP.to_le_bytes()).map_err(io_err)?;
            let (h, d, k) = mlp_shape(model);
            w.write_all(&(h as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(k as u64).to_le_bytes()).map_err(io_err)?;
            let act: u32 = match m.activation() {
                Activation::Relu => 0,
                Activation::Identity => 1,
            };
            w.write_all(&act.to_le_bytes()).map_err(io_err)?;
        }
    }
    for &p in model.params() {
        w.write_all(&p.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_snlm(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!("truncated while reading {what}: {e}"),
        })?;
        offset += n as u64;
        Ok(buf)
    };

    let magic = take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let family = u32::from_le_bytes(take(4, "family tag")?.try_into().unwrap());
    let read_u64 = |what: &str, take: &mut dyn FnMut(usize, &str) -> Result<Vec<u8>>| -> Result<usize> {
        Ok(u64::from_le_bytes(take(8, what)?.try_into().unwrap()) as usize)
    };

    let (mut model, n_params) = match family {
        FAMILY_LINEAR => {
            let d = read_u64("dim", &mut take)?;
            (Model::Linear(LinearModel::zeros(d)), d)
        }
        FAMILY_DLN2 => {
            let h = read_u64("hidden", &mut take)?;
            let d = read_u64("dim", &mut take)?;
            (Model::Dln2(Dln2Model::zeros(h, d)), h * d + h)
        }
        FAMILY_MLP => {
            let h = read_u64("hidden", &mut take)?;
            let d = read_u64("dim", &mut take)?;
            let k = read_u64("classes", &mut take)?;
            let act = u32::from_le_bytes(take(4, "activation")?.try_into().unwrap());
            let activation = match act {
                0 => Activation::Relu,
                1 => Activation::Identity,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        offset: offset - 4,
                        msg: format!("unknown activation tag {other}"),
                    })
                }
            };
            (
                Model::Mlp(MlpModel::zeros(h, d, k, activation)),
                h * d + k * h,
            )
        }
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: 8,
                msg: format!("unknown family tag {other}"),
            })
        }
    };

    let params = model.params_mut();
    debug_assert_eq!(params.len(), n_params);
    for p in params.iter_mut() {
        *p = f64::from_le_bytes(take(8, "parameters")?.try_into().unwrap());
    }
    // reject trailing bytes
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: "trailing bytes after parameters".into(),
        });
    }
    Ok(model)
}

fn dln2_shape(model: &Model) -> (usize, usize) {
    match model {
        Model::Dln2(m) => (m.second_layer().len(), model.input_dim()),
        _ => unreachable!(),
    }
}

fn mlp_shape(model: &Model) -> (usize, usize, usize) {
    match model {
        Model::Mlp(m) => {
            let h = m.second_layer().len() / model.output_classes();
            (h, model.input_dim(), model.output_classes())
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn roundtrip_all_families() {
        let mut rng = stream_rng(1, 0);
        let models = [
            Model::Linear(LinearModel::random(7, 0.5, &mut rng)),
            Model::Dln2(Dln2Model::random(3, 5, 0.5, &mut rng)),
            Model::Mlp(MlpModel::random(4, 6, 3, Activation::Relu, 0.5, &mut rng)),
            Model::Mlp(MlpModel::random(4, 6, 1, Activation::Identity, 0.5, &mut rng)),
        ];
        for m in &models {
            let f = tempfile::NamedTempFile::new().unwrap();
            write_snlm(m, f.path()).unwrap();
            let back = read_snlm(f.path()).unwrap();
            assert_eq!(*m, back);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_snlm(&Model::Linear(LinearModel::zeros(2)), f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes[0] = b'X';
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(matches!(read_snlm(f.path()), Err(Error::Parse { offset: 0, .. })));
    }
}
