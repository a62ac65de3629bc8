//! Versioned parameter container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "CKPT"  u32 version  u32 meta_len  meta (UTF-8 JSON ModelSpec)
//! u32 count
//! count × { u32 name_len  name  u32 ndim  ndim × u32 dim }
//! count × f32 payloads in name-table order
//! ```
//!
//! Memory banks are never stored; the decoupling head's weights are present
//! only when the model carries one.

use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelSpec};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            spec: model.spec().clone(),
            tensors: model.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuild the model. Parameters are stored as `f32`.
    pub fn into_model(self) -> crate::error::Result<Model> {
        let mut model = Model::new(self.spec, 0)?;
        model.load_values(&self.tensors)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.spec).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, meta.len() as u32);
        buf.extend_from_slice(&meta);
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let spec: ModelSpec =
            serde_json::from_slice(meta).map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.u32("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
            let data: Vec<Real> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { spec, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::decode(&bytes)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::stfd::StfdConfig;

    fn spec(stfd: bool) -> ModelSpec {
        ModelSpec {
            joints: 3,
            frames: 4,
            num_classes: 2,
            encoder: EncoderConfig { channels: 4, hidden: 3, kernel: 3, temporal_stride: 1, ..Default::default() },
            stfd: stfd.then_some(StfdConfig { reduction: 2, embedding_dim: 3 }),
        }
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let m = Model::new(spec(true), 4).unwrap();
        let ck = Checkpoint::from_model(&m);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.spec, ck.spec);
        assert_eq!(back.tensors.len(), m.params().len());
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32) as Real, *y);
            }
        }
        let rebuilt = back.into_model().unwrap();
        assert!(rebuilt.stfd().is_some());
    }

    #[test]
    fn framework_free_model_has_no_stfd_tensors() {
        let m = Model::new(spec(false), 4).unwrap();
        let ck = Checkpoint::from_model(&m);
        assert!(ck.tensors.iter().all(|(n, _)| !n.starts_with("stfd.")));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint::from_model(&Model::new(spec(false), 1).unwrap()).encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 2]), Err(CheckpointError::Truncated(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(CheckpointError::UnsupportedVersion(2))));
    }
}
