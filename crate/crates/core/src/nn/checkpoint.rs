//! Checkpoint files: a versioned header, a UTF-8 JSON metadata block and a
//! manifest of named tensors.
//!
//! ```text
//! "TOKDCKPT" | u32 version | u32 meta_len | meta bytes | u32 count |
//!   count × ( u32 name_len | name bytes | tensor record )
//! ```
//! All integers are little-endian; tensor records use [`Tensor::write_to`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TOKDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: String) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    /// Insert every entry of `state` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, state: BTreeMap<String, Tensor>) {
        for (k, v) in state {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta = read_string(r)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let t = Tensor::read_from(r)?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 name: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut c = Checkpoint::new("{\"kind\":\"test\"}".into());
        c.tensors.insert("a.0.weight".into(), Tensor::from_vec(vec![1.0, -2.5]));
        c.tensors.insert("b".into(), Tensor::ones(&[2, 2]));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), c);
        buf[8] = 9;
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
