//! `GTAS` parameter checkpoints.
//!
//! ```text
//! "GTAS" | version u16 | entry count u32
//! per entry: name len u16 | name (UTF-8) | role u8 (0 extractor, 1 predictor)
//!            | layer index u16 | ndim u8 | dims u32 × ndim | f32 × Π dims
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::segmodel::{ParamRole, ParamStore};

use super::bytes::{put_f32s, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTAS";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.iter() {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Structure(format!("parameter name `{}` too long", e.name)))?;
        let layer = u16::try_from(e.layer_index)
            .map_err(|_| Error::Structure(format!("layer index {} too large", e.layer_index)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(match e.role {
            ParamRole::Extractor => 0,
            ParamRole::Predictor => 1,
        });
        out.extend_from_slice(&layer.to_le_bytes());
        out.push(e.tensor.ndim() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, e.tensor.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut roles = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.offset();
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let role = match r.u8("role")? {
            0 => ParamRole::Extractor,
            1 => ParamRole::Predictor,
            other => return r.fail(format!("unknown role tag {other}")),
        };
        let layer = r.u16("layer index")? as usize;
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        if dims.is_empty() || len == 0 {
            return r.fail(format!("parameter `{name}` has empty shape {dims:?}"));
        }
        let data = r.f32s(len, "parameter payload")?;
        layers.push((name, layer, Tensor::new(dims, data)?));
        roles.push((layer, role));
    }
    r.finish()?;

    // Roles must be the boundary split of the layer indices.
    let boundary = roles
        .iter()
        .filter(|(_, role)| *role == ParamRole::Extractor)
        .map(|(l, _)| l + 1)
        .max()
        .unwrap_or(0);
    let store = ParamStore::from_layers(layers, boundary).map_err(|e| Error::Format {
        offset: r.offset(),
        message: e.to_string(),
    })?;
    if store.iter().zip(&roles).any(|(e, (_, role))| e.role != *role) {
        return Err(Error::Format {
            offset: r.offset(),
            message: "role tags do not follow a single layer boundary".into(),
        });
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
