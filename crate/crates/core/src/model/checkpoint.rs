//! Binary checkpoint format.
//!
//! ```text
//! "IKDP"                      magic
//! u16 version                 (= 1)
//! u32 block count
//!   per block: u8 kind (0 dense, 1 conv, 2 pool, 3 flatten), u32 width, u32 kernel
//! u32 input rank, u32 dims…
//! u8 head (0 softmax, 1 sigmoid)
//! u32 class count
//! u16 id length, id bytes (UTF-8)
//! u64 init seed
//! f32 parameters, layer by layer (weight then bias), output projection last
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::structure::{BlockSpec, Head, Structure};
use super::{Model, ParamSet};
use crate::diffcore::Tensor;

pub const MAGIC: &[u8; 4] = b"IKDP";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"IKDP\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    VersionMismatch(u16),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after parameters")]
    TrailingBytes(usize),
    #[error("invalid structure descriptor: {0}")]
    Descriptor(String),
    #[error("checkpoint parameters do not match the structure")]
    ParamMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(model: &Model) -> Result<Vec<u8>, CheckpointError> {
    let s = &model.structure;
    let layers = s.layers().map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    if !model.params.matches(s) {
        return Err(CheckpointError::ParamMismatch);
    }
    let mut out = Vec::with_capacity(64 + model.params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(s.blocks.len() as u32).to_le_bytes());
    for block in &s.blocks {
        let (tag, width, kernel) = match *block {
            BlockSpec::Dense { width } => (0u8, width, 0),
            BlockSpec::Conv { filters, kernel } => (1, filters, kernel),
            BlockSpec::Pool => (2, 0, 0),
            BlockSpec::Flatten => (3, 0, 0),
        };
        out.push(tag);
        out.extend_from_slice(&(width as u32).to_le_bytes());
        out.extend_from_slice(&(kernel as u32).to_le_bytes());
    }
    out.extend_from_slice(&(s.input_shape.len() as u32).to_le_bytes());
    for &d in &s.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(match s.head {
        Head::Softmax => 0,
        Head::Sigmoid => 1,
    });
    out.extend_from_slice(&(s.num_classes as u32).to_le_bytes());
    let id = model.id.as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&model.params.seed.to_le_bytes());
    debug_assert_eq!(layers.len() * 2, model.params.tensors.len());
    for t in &model.params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n - (self.bytes.len() - self.pos) });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let tag = r.u8()?;
        let width = r.u32()? as usize;
        let kernel = r.u32()? as usize;
        blocks.push(match tag {
            0 => BlockSpec::Dense { width },
            1 => BlockSpec::Conv { filters: width, kernel },
            2 => BlockSpec::Pool,
            3 => BlockSpec::Flatten,
            t => return Err(CheckpointError::Descriptor(format!("unknown block tag {t}"))),
        });
    }
    let rank = r.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let head = match r.u8()? {
        0 => Head::Softmax,
        1 => Head::Sigmoid,
        t => return Err(CheckpointError::Descriptor(format!("unknown head tag {t}"))),
    };
    let num_classes = r.u32()? as usize;
    let id_len = r.u16()? as usize;
    let id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| CheckpointError::Descriptor("model id is not UTF-8".into()))?;
    let seed = r.u64()?;
    let structure = Structure { blocks, input_shape, num_classes, head };
    let layers = structure.layers().map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    let mut tensors = Vec::with_capacity(layers.len() * 2);
    for layer in layers {
        for shape in [layer.weight.clone(), vec![layer.bias]] {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(shape, data));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Model { id, structure, params: ParamSet { tensors, seed } })
}

pub fn checkpoint_save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Model, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Model {
        let structure = Structure {
            blocks: vec![
                BlockSpec::Conv { filters: 3, kernel: 3 },
                BlockSpec::Pool,
                BlockSpec::Flatten,
                BlockSpec::Dense { width: 5 },
            ],
            input_shape: vec![1, 6, 6],
            num_classes: 4,
            head: Head::Sigmoid,
        };
        let params = init_params(&structure, 11).unwrap();
        Model { id: "M2".into(), structure, params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::VersionMismatch(9))));
    }

    #[test]
    fn truncated_mid_parameters() {
        let bytes = encode(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 6];
        assert!(matches!(decode(cut), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn trailing_garbage() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(CheckpointError::TrailingBytes(1))));
    }
}
