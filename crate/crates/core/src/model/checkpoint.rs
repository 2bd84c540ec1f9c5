//! Binary checkpoint: magic, version, the model configuration as JSON, then
//! every named parameter tensor as little-endian `f64`.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ConfigError, Dsan, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DSANCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint config: {0}")]
    ConfigJson(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint parameter {name}: {reason}")]
    Param { name: String, reason: String },
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint(w: &mut impl Write, model: &Dsan) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let cfg = serde_json::to_vec(model.config())?;
    put_u64(w, cfg.len() as u64)?;
    w.write_all(&cfg)?;
    let params = model.params();
    put_u64(w, params.len() as u64)?;
    for (name, t) in params.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Dsan, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = get_u64(r)? as usize;
    let cfg: ModelConfig = serde_json::from_slice(&get_bytes(r, len)?)?;
    let mut model = Dsan::new(cfg, 0)?;
    let count = get_u64(r)? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::Param {
            name: "*".into(),
            reason: format!("{count} tensors stored, model has {}", model.params().len()),
        });
    }
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, name_len)?).map_err(|_| CheckpointError::Param {
            name: "?".into(),
            reason: "name is not UTF-8".into(),
        })?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = get_bytes(r, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model.params().id(&name).ok_or_else(|| CheckpointError::Param {
            name: name.clone(),
            reason: "unknown parameter".into(),
        })?;
        if model.params().get(id).shape() != shape.as_slice() {
            return Err(CheckpointError::Param {
                reason: format!(
                    "stored shape {shape:?}, model expects {:?}",
                    model.params().get(id).shape()
                ),
                name,
            });
        }
        *model.params_mut().get_mut(id) = Tensor::new(shape, data).expect("length checked");
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = tiny_config();
        let mut model = Dsan::new(cfg, 11).unwrap();
        // Values that a text format would be likely to mangle.
        let id = model.params().ids().next().unwrap();
        let t = model.params_mut().get_mut(id);
        t.data_mut()[0] = -0.0;
        t.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        t.data_mut()[2] = 0.1 + 0.2;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        for ((na, a), (nb, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na}");
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        let err = read_checkpoint(&mut &b"NOTACKPTxxxx"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }

    #[test]
    fn rejects_truncation() {
        let model = Dsan::new(tiny_config(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(
            read_checkpoint(&mut buf.as_slice()),
            Err(CheckpointError::Io(_))
        ));
    }
}
