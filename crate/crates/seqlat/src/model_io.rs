//! Model file format.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic   8 bytes  "SEQLATM1"
//! version u32      1
//! config  u32 len + UTF-8 TOML echo of the run configuration
//! count   u32      number of tensors
//! tensor  u32 name len + name bytes
//!         u32 rank + u64 dims
//!         f64 data, row major
//! ```
//!
//! Loading rebuilds the model from the embedded configuration and then
//! fills each tensor by name, rejecting shape or inventory mismatches.
//! Saving and loading round-trips parameters bit for bit.

use crate::config::RunConfig;
use crate::weights::Model;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SEQLATM1";
const VERSION: u32 = 1;

pub fn save_model(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let config_text = config.to_toml();
    out.write_all(&(config_text.len() as u32).to_le_bytes())?;
    out.write_all(config_text.as_bytes())?;
    let tensors = model.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in &shape {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    fn bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }
}

pub fn load_model(path: &Path) -> Result<(RunConfig, Model)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic = r.bytes(8)?;
    if magic != MAGIC {
        return Err(Error::Data("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported model version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.bytes(config_len)?)
        .map_err(|_| Error::Data("model config is not UTF-8".into()))?;
    let config = RunConfig::parse(&config_text)?;
    let mut model = config.build_model()?;
    let expected = model.tensors();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Data(format!(
            "model file has {count} tensors, the configuration implies {}",
            expected.len()
        )));
    }
    let mut flat = Vec::new();
    for (want_name, want_shape, _) in &expected {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        if name != *want_name {
            return Err(Error::Data(format!(
                "tensor {name} where {want_name} was expected"
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != *want_shape {
            return Err(Error::Data(format!(
                "tensor {name} has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        for _ in 0..len {
            flat.push(r.f64()?);
        }
    }
    model.load_flat(&flat)?;
    Ok((config, model))
}
