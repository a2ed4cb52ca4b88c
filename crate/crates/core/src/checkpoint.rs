//! Binary checkpoint container: a small string-keyed metadata section plus
//! named f64 arrays with shape headers. Round-trips bit-exactly.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic  b"RLAB"          4 bytes
//! version u32             currently 1
//! meta    u32 count, then count × (u32 key_len, key utf8, u32 val_len, val utf8)
//! arrays  u32 count, then count × (u32 name_len, name utf8,
//!                                  u8 ndim, ndim × u32 dims,
//!                                  prod(dims) × f64)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::Result;

const MAGIC: &[u8; 4] = b"RLAB";
const VERSION: u32 = 1;

/// Named f64 array with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory checkpoint. BTreeMaps keep serialization order deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, val: impl ToString) {
        self.meta.insert(key.to_string(), val.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::input(format!("checkpoint missing meta key {key:?}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::input(format!("checkpoint meta {key:?} is not an integer")))
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "array {name:?}: shape {dims:?} holds {expect} values, got {}",
                data.len()
            )));
        }
        self.arrays.insert(name.to_string(), ArrayEntry { dims, data });
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::input(format!("checkpoint missing array {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.arrays {
            write_str(&mut w, name)?;
            w.write_all(&[entry.dims.len() as u8])?;
            for &d in &entry.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in &entry.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::input(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut ckpt = Checkpoint::new();
        let n_meta = read_u32(&mut r)? as usize;
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            ckpt.meta.insert(k, v);
        }
        let n_arrays = read_u32(&mut r)? as usize;
        for _ in 0..n_arrays {
            let name = read_str(&mut r)?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u32(&mut r)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            ckpt.arrays.insert(name, ArrayEntry { dims, data });
        }
        Ok(ckpt)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::input(format!("checkpoint string of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::input("checkpoint string is not utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("rnnt_lab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");

        let mut c = Checkpoint::new();
        c.set_meta("kind", "demo");
        c.set_meta("hidden", 64);
        c.insert("w", vec![2, 3], vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0])
            .unwrap();
        c.insert("b", vec![2], vec![0.25, 0.5]).unwrap();
        c.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        // byte-identical on second write
        let path2 = dir.join("b.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut c = Checkpoint::new();
        assert!(c.insert("w", vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("rnnt_lab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
