//! Versioned binary checkpoint format: configuration text, vocabulary, and
//! named parameter tensors with shapes. All integers little-endian; tensor
//! data is raw f64 bits, so a save/load round trip is bit-exact.
//!
//! Layout:
//! ```text
//! magic "MOGCKPT\0" | version u32 | config: str | vocab: count u64, str...
//! | tensors: count u64, (name str, rank u32, dims u64..., data f64...)...
//! ```
//! where `str` is a u64 length followed by UTF-8 bytes.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::nn::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    Truncated,
    BadMagic,
    UnsupportedVersion(u32),
    BadUtf8,
    BadTensor(String),
}

impl core::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CheckpointError::Truncated => write!(f, "checkpoint truncated"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            CheckpointError::BadUtf8 => write!(f, "invalid utf-8 string"),
            CheckpointError::BadTensor(name) => write!(f, "malformed tensor {name}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CheckpointError {}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub config_text: String,
    pub vocab: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(config_text: &str, vocab: &[String], params: &Params) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, config_text);
    put_u64(&mut out, vocab.len() as u64);
    for tok in vocab {
        put_str(&mut out, tok);
    }
    put_u64(&mut out, params.len() as u64);
    for (_, name, tensor) in params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for &x in tensor.data() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        core::str::from_utf8(bytes)
            .map(|s| s.to_string())
            .map_err(|_| CheckpointError::BadUtf8)
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_text = r.str()?;
    let vocab_len = r.u64()? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(r.str()?);
    }
    let tensor_count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(r.u64()?));
        }
        let tensor =
            Tensor::new(shape, data).map_err(|_| CheckpointError::BadTensor(name.clone()))?;
        tensors.push((name, tensor));
    }
    Ok(CheckpointData {
        version,
        config_text,
        vocab,
        tensors,
    })
}

/// Restore decoded tensors into an already-built model's parameter store.
/// Every stored name must exist with a matching shape.
pub fn apply_tensors(
    params: &mut Params,
    tensors: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    for (name, tensor) in tensors {
        let id = params
            .find(name)
            .ok_or_else(|| CheckpointError::BadTensor(name.clone()))?;
        if params.tensor(id).shape() != tensor.shape() {
            return Err(CheckpointError::BadTensor(name.clone()));
        }
        *params.tensor_mut(id) = tensor.clone();
    }
    Ok(())
}
