//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "RDCK" | version u32 | channels u32 | future_ms u32 | tensor count u32
//! per tensor: name len u32 | UTF-8 name | rank u32 | extents u32... | f32 data
//! ```
//!
//! Round-trips are bit-exact; the loader validates names and shapes against
//! the layer plan for the stored channel width.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::student::{build_student, NamedParam, StudentConfig, StudentError, StudentNet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {name} has shape {actual:?}, the plan expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("checkpoint contains unknown tensor {name}")]
    UnknownTensor { name: String },
    #[error("tensor {name} contains a non-finite value")]
    NonFinite { name: String },
    #[error(transparent)]
    Student(#[from] StudentError),
}

pub fn save_checkpoint(net: &StudentNet, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.config().channels as u32).to_le_bytes());
    out.extend_from_slice(&net.config().future_ms.to_le_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StudentNet, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<StudentNet, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let channels = r.u32("channels")? as usize;
    let future_ms = r.u32("future_ms")?;
    let count = r.u32("tensor count")? as usize;

    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|_| CheckpointError::NonFinite { name: name.clone() })?;
        tensors.insert(name, tensor);
    }

    // The plan for this width dictates the parameter set; the seed is
    // irrelevant once trained weights are loaded.
    let config = StudentConfig::new(channels, future_ms, 0)?;
    let template = build_student(config);
    let mut params = Vec::with_capacity(template.params().len());
    for p in template.params() {
        let tensor = tensors
            .remove(&p.name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: p.name.clone() })?;
        if tensor.shape() != p.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.tensor.shape().to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
        params.push(NamedParam { name: p.name.clone(), tensor });
    }
    if let Some(name) = tensors.into_keys().next() {
        return Err(CheckpointError::UnknownTensor { name });
    }
    Ok(StudentNet::from_parts(config, params))
}
