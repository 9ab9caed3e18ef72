//! Named parameter sets and the binary checkpoint format.
//!
//! Checkpoint layout: magic `LENS`, format version `u32`, then one record
//! per tensor: name length `u32`, UTF-8 name, dtype tag `u8` (0 = f32),
//! rank `u32`, dimensions `u32` each, payload in little-endian order.
//! Round-trips are bit exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LENS";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match model: {0}")]
    Incompatible(String),
}

/// One named parameter with its trainability flag.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Insertion order is stable, so
/// serialization and optimizer traversal are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on duplicate names: parameter layouts are
    /// built from configs, so a collision is a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, trainable: bool) {
        let name = name.into();
        let tensor = tensor.with_requires_grad(trainable);
        if self.index.contains_key(&name) {
            panic!("duplicate parameter name: {name}");
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).copied().map(move |i| &mut self.params[i].tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Flips the trainability of an existing parameter. Returns false if no
    /// parameter has that name.
    pub fn set_trainable(&mut self, name: &str, flag: bool) -> bool {
        match self.index.get(name) {
            Some(&i) => {
                self.params[i].trainable = flag;
                self.params[i].tensor.set_requires_grad(flag);
                true
            }
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut().filter(|p| p.trainable)
    }

    /// Total element count, optionally restricted to trainable parameters.
    pub fn numel(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copies values from `other` for every name present in both sets.
    /// Errors if shapes differ or `other` holds names this set lacks.
    pub fn load_values(&mut self, other: &[(String, Tensor<f32>)]) -> Result<(), CheckpointError> {
        for (name, tensor) in other {
            let Some(&i) = self.index.get(name) else {
                return Err(CheckpointError::Incompatible(format!("unexpected tensor {name}")));
            };
            let dst = &mut self.params[i].tensor;
            if dst.shape() != tensor.shape() {
                return Err(CheckpointError::Incompatible(format!(
                    "{name}: shape {:?} in file, {:?} in model",
                    tensor.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(tensor.data());
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = Path::new(&tmp).to_path_buf();
    {
        let mut file = fs::File::create(&tmp_path)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp_path, path)
}

/// Serializes the parameter set in insertion order.
pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let payload: usize = params.iter().map(|p| 13 + p.name.len() + p.tensor.numel() * 4).sum();
    let mut buf = Vec::with_capacity(8 + payload);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &dim in p.tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    Ok(atomic_write(path, &encode_checkpoint(params))?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut out = Vec::new();
    while !r.done() {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Format(format!("unsupported dtype tag {dtype}")));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
