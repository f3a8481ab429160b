//! Flat-file model parameter persistence.
//!
//! Format (little-endian): magic `CMDL`, version u32 = 1, entry count u32;
//! per entry a name (u16 length + UTF-8 bytes), rank u8, and u32 dims;
//! then all entries' values as f32 blobs in declared order. Bit-exact,
//! diffable, and independent of any serialization framework. The topology
//! itself is not stored — loading validates names and shapes against a
//! freshly built model.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::coop::CoopModel;
use crate::tensor::Elem;

pub const MODEL_MAGIC: [u8; 4] = *b"CMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad model magic {found:?}, expected {MODEL_MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported model version {found}, expected {MODEL_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("model file ends early: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("model file is missing parameter {0:?}")]
    MissingParam(String),
    #[error("model file has unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {name:?} has shape {file:?} in the file but {model:?} in the model")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("model file holds a non-finite value in {0:?}")]
    NonFinite(String),
}

fn named_params(model: &CoopModel) -> Vec<(String, Vec<usize>, Vec<Elem>)> {
    let mut out = Vec::new();
    for p in model.top().params() {
        out.push((
            format!("top.{}", p.name),
            p.shape().to_vec(),
            p.value().data().to_vec(),
        ));
    }
    if let Some(bottom) = model.bottom() {
        for p in bottom.params() {
            out.push((
                format!("bottom.{}", p.name),
                p.shape().to_vec(),
                p.value().data().to_vec(),
            ));
        }
    }
    out
}

pub fn save_model(path: impl AsRef<Path>, model: &CoopModel) -> Result<(), ModelIoError> {
    let entries = named_params(model);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, _) in &entries {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(shape.len() as u8);
        for &d in shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, _, data) in &entries {
        for &v in data {
            #[allow(clippy::unnecessary_cast)] // Elem -> f32 on the f64 build
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelIoError::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads parameter values into an already-built model of the same
/// topology. Every model parameter must be present with a matching shape
/// and every file entry must land somewhere.
pub fn load_model_into(path: impl AsRef<Path>, model: &mut CoopModel) -> Result<(), ModelIoError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4)?;
    if magic != MODEL_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(ModelIoError::BadMagic { found });
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(ModelIoError::UnsupportedVersion { found: version });
    }
    let count = cur.u32()? as usize;
    let mut index: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len)?).into_owned();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        index.push((name, shape));
    }
    let mut values: Vec<(String, Vec<usize>, Vec<Elem>)> = Vec::with_capacity(count);
    for (name, shape) in index {
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(ModelIoError::NonFinite(name.clone()));
            }
            data.push(v as Elem);
        }
        values.push((name, shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(ModelIoError::Truncated {
            expected: cur.pos as u64,
            actual: bytes.len() as u64,
        });
    }

    let mut by_name: std::collections::BTreeMap<String, (Vec<usize>, Vec<Elem>)> =
        values.into_iter().map(|(n, s, d)| (n, (s, d))).collect();

    let mut fill = |prefix: &str,
                    params: &mut dyn Iterator<Item = &mut crate::tensor::Param>|
     -> Result<(), ModelIoError> {
        for p in params {
            let key = format!("{prefix}.{}", p.name);
            let (shape, data) = by_name
                .remove(&key)
                .ok_or_else(|| ModelIoError::MissingParam(key.clone()))?;
            if shape != p.shape() {
                return Err(ModelIoError::ShapeMismatch {
                    name: key,
                    file: shape,
                    model: p.shape().to_vec(),
                });
            }
            p.value_mut().data_mut().copy_from_slice(&data);
        }
        Ok(())
    };
    fill("top", &mut model.top_mut().params_mut())?;
    if let Some(bottom) = model.bottom_mut() {
        fill("bottom", &mut bottom.params_mut())?;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(ModelIoError::UnknownParam(name));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coop::{default_same_taps, ConnectionScheme};
    use crate::segnet::default_spec;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmdl");
        let spec = default_spec(3, 4);
        let model = CoopModel::build(
            &spec,
            ConnectionScheme::same_layer(default_same_taps()),
            5,
            6,
        )
        .unwrap();
        save_model(&path, &model).unwrap();

        // A model built from different seeds converges to the saved values.
        let mut other = CoopModel::build(
            &spec,
            ConnectionScheme::same_layer(default_same_taps()),
            50,
            60,
        )
        .unwrap();
        load_model_into(&path, &mut other).unwrap();
        for (a, b) in model.top().params().iter().zip(other.top().params()) {
            assert_eq!(a.value().data(), b.value().data());
        }
        for (a, b) in model
            .bottom()
            .unwrap()
            .params()
            .iter()
            .zip(other.bottom().unwrap().params())
        {
            assert_eq!(a.value().data(), b.value().data());
        }
    }

    #[test]
    fn load_rejects_topology_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmdl");
        let spec = default_spec(3, 4);
        let single = CoopModel::build(&spec, ConnectionScheme::single(), 5, 6).unwrap();
        save_model(&path, &single).unwrap();

        let mut ensemble = CoopModel::build(&spec, ConnectionScheme::ensemble(), 5, 6).unwrap();
        assert!(matches!(
            load_model_into(&path, &mut ensemble),
            Err(ModelIoError::MissingParam(_))
        ));

        let mut wrong_k =
            CoopModel::build(&default_spec(3, 7), ConnectionScheme::single(), 5, 6).unwrap();
        assert!(matches!(
            load_model_into(&path, &mut wrong_k),
            Err(ModelIoError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn load_rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmdl");
        let spec = default_spec(3, 4);
        let model = CoopModel::build(&spec, ConnectionScheme::single(), 5, 6).unwrap();
        save_model(&path, &model).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let mut m = CoopModel::build(&spec, ConnectionScheme::single(), 1, 2).unwrap();
        assert!(matches!(
            load_model_into(&path, &mut m),
            Err(ModelIoError::BadMagic { .. })
        ));

        std::fs::write(&path, &good[..good.len() - 7]).unwrap();
        assert!(matches!(
            load_model_into(&path, &mut m),
            Err(ModelIoError::Truncated { .. })
        ));
    }
}
