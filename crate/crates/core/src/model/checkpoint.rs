//! Checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STGC"            magic
//! u16               version (1)
//! u32, [u8]         length and UTF-8 JSON of {"model": ModelConfig, "scaler": ZScore}
//! u32               block count
//! per block:
//!   u16, [u8]       name length and name
//!   u8              kind: 0 trainable, 1 buffer (batch-norm running stats)
//!   u8, [u32]       rank and dims
//!   [f64]           row-major values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, StgModel};
use crate::data::ZScore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    scaler: ZScore,
}

pub fn save_checkpoint(model: &StgModel, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        scaler: model.scaler(),
    })?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let params = model.params();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[u8::from(!params.is_trainable(id))])?;
        let t = params.get(id);
        out.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r)?) as usize)
}

fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

/// Rebuilds the model from its config and overwrites every parameter and
/// buffer by name. The set of names and their shapes must match exactly.
pub fn load_checkpoint(path: &Path) -> Result<StgModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    if &read_array::<4>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)?;
    let header: Header = serde_json::from_slice(&read_vec(&mut r, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = StgModel::new(header.model, header.scaler, 0)?;
    let count = read_u32(&mut r)?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} blocks, model expects {}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let name = String::from_utf8(read_vec(&mut r, name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let [kind] = read_array::<1>(&mut r)?;
        let [rank] = read_array::<1>(&mut r)?;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = read_vec(&mut r, numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let params = model.params_mut();
        if params.get(id).shape() != shape.as_slice() || (kind == 1) == params.is_trainable(id) {
            return Err(Error::Checkpoint(format!(
                "parameter {name} does not match the model"
            )));
        }
        if seen[id.index()] {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        seen[id.index()] = true;
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
        }
        *params.get_mut(id) = t;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stgc");
        let mut model = StgModel::new(
            ModelConfig::desk(),
            ZScore {
                mean: 1.0,
                std: 2.0,
            },
            3,
        )
        .unwrap();
        let id = model.params().id("encoder.layer0.bn.running_mean").unwrap();
        model.params_mut().get_mut(id).data_mut()[0] = 0.25;
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.scaler(), model.scaler());
        for id in model.params().ids() {
            assert_eq!(back.params().get(id), model.params().get(id));
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stgc");
        let model = StgModel::new(
            ModelConfig::desk(),
            ZScore {
                mean: 0.0,
                std: 1.0,
            },
            0,
        )
        .unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
