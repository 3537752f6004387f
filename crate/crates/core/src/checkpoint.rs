//! Versioned little-endian container for named tensors and integer lists.
//!
//! Layout: magic `PODCKPT\0`, `u32` version, `u32` entry count, then per
//! entry `u32` name length, UTF-8 name, `u8` kind (0 = f64 tensor,
//! 1 = u64 list), `u32` rank, `u64` extents, payload. Floats are stored as
//! raw IEEE-754 bits so a load reproduces every value exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PODCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Entry {
    Tensor(Tensor),
    Ints(Vec<u64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blob {
    entries: BTreeMap<String, Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Blob {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        let plain = Tensor::from_parts(t.shape().to_vec(), t.values().to_vec());
        self.entries.insert(name.to_string(), Entry::Tensor(plain));
    }

    pub fn put_ints(&mut self, name: &str, v: &[u64]) {
        self.entries.insert(name.to_string(), Entry::Ints(v.to_vec()));
    }

    pub fn put_f64(&mut self, name: &str, v: f64) {
        self.put_tensor(name, &Tensor::from_parts(vec![1], vec![v]));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(_) => Err(Error::Format(format!("entry {name} is not a tensor"))),
            None => Err(Error::Format(format!("missing entry {name}"))),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[u64]> {
        match self.entries.get(name) {
            Some(Entry::Ints(v)) => Ok(v),
            Some(_) => Err(Error::Format(format!("entry {name} is not an integer list"))),
            None => Err(Error::Format(format!("missing entry {name}"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        self.tensor(name)?.item()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match e {
                Entry::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.values() {
                        out.extend_from_slice(&v.to_bits().to_le_bytes());
                    }
                }
                Entry::Ints(v) => {
                    out.push(1);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let kind = r.u8()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let entry = match kind {
                0 => {
                    let vals = (0..n)
                        .map(|_| r.u64().map(f64::from_bits))
                        .collect::<Result<Vec<_>>>()?;
                    Entry::Tensor(Tensor::new(shape, vals)?)
                }
                1 => Entry::Ints((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                k => return Err(Error::Format(format!("entry {name}: unknown kind {k}"))),
            };
            entries.insert(name, entry);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Blob { entries })
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Replaces `path` with `bytes` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 1..40),
            ints in prop::collection::vec(any::<u64>(), 0..10),
        ) {
            let mut b = Blob::new();
            b.put_tensor("w", &Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            b.put_ints("idx", &ints);
            let back = Blob::from_bytes(&b.to_bytes()).unwrap();
            let got: Vec<u64> = back.tensor("w").unwrap().values().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.ints("idx").unwrap(), &ints[..]);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Blob::from_bytes(b"nope"), Err(Error::Format(_))));
        let mut bytes = Blob::new().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Blob::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut b = Blob::new();
        b.put_f64("eta", 1.25);
        b.save(&p).unwrap();
        assert_eq!(Blob::load(&p).unwrap().f64("eta").unwrap(), 1.25);
    }
}
