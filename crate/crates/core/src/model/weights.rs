//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RCTM"                      magic, 4 bytes
//! u32                         format version (1)
//! u32                         number of config fields
//!   per field: u16 name length, UTF-8 name, i64 value
//! per tensor, until end of file:
//!   u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 x prod(dims)
//! ```

use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

use super::{ModelConfig, ModelError, ModelParams};

pub const MAGIC: &[u8; 4] = b"RCTM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let fields = params.config.to_fields();
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (name, value) in fields {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&value.to_le_bytes());
    }
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_weights(params);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i64(&mut self, what: &str) -> Result<i64, ModelError> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn name(&mut self, what: &str) -> Result<String, ModelError> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| ModelError::Format(format!("{what} is not valid UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(ModelError::Format(format!("bad magic {magic:?}, expected \"RCTM\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let n_fields = r.u32("config field count")?;
    let mut fields = Vec::with_capacity(n_fields as usize);
    for _ in 0..n_fields {
        let name = r.name("config field name")?;
        let value = r.i64(&format!("config field `{name}`"))?;
        fields.push((name, value));
    }
    let config = ModelConfig::from_fields(&fields)?;

    let mut tensors = Vec::new();
    while !r.done() {
        let name = r.name("tensor name")?;
        let rank = r.u8(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("dims of `{name}`"))? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &format!("data of `{name}`"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Format(format!("tensor `{name}` has non-finite values")));
        }
        tensors.push((name, Tensor::new(shape, data).unwrap()));
    }
    super::Params::from_tensors(&config, tensors)
}
