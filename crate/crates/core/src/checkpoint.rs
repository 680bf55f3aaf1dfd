//! Versioned binary checkpoints: named f64 arrays plus string metadata.
//!
//! Layout (little-endian): magic `DMCK`, one format-version byte, the config
//! hash and config text, `key = value` metadata, then arrays as name, rank,
//! dims and values. Strings are a u32 length followed by UTF-8 bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DMCK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<NamedArray>,
}

fn put_u32(w: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit the format")))?;
    w.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, config_text: impl Into<String>) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            config_text: config_text.into(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata {key} = {v:?}")))
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        });
    }

    /// Store every parameter of `store` under `prefix + name`.
    pub fn push_store<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for p in store.iter() {
            self.push(format!("{prefix}{}", p.name), &p.value);
        }
    }

    pub fn push_all<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>, values: &[Tensor<S>]) {
        for (p, v) in store.iter().zip(values) {
            self.push(format!("{prefix}{}", p.name), v);
        }
    }

    pub fn get<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let a = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))?;
        Ok(Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&v| S::lit(v)).collect()))
    }

    /// Arrays named `prefix + name` for every parameter of `store`, checked
    /// against the parameter shapes.
    pub fn load_all<S: Scalar>(&self, prefix: &str, store: &ParamStore<S>) -> Result<Vec<Tensor<S>>> {
        store
            .iter()
            .map(|p| {
                let name = format!("{prefix}{}", p.name);
                let t = self.get::<S>(&name)?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                Ok(t)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.push(FORMAT_VERSION);
        put_str(&mut w, &self.config_hash)?;
        put_str(&mut w, &self.config_text)?;
        put_u32(&mut w, self.meta.len())?;
        for (k, v) in &self.meta {
            put_str(&mut w, k)?;
            put_str(&mut w, v)?;
        }
        put_u32(&mut w, self.arrays.len())?;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array {} does not match its shape", a.name)));
            }
            put_str(&mut w, &a.name)?;
            put_u32(&mut w, a.shape.len())?;
            for &d in &a.shape {
                put_u32(&mut w, d)?;
            }
            for v in &a.data {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(w)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let mut c = Checkpoint::new(r.string()?, r.string()?);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            c.meta.push((k, r.string()?));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("array {name} is too large")))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            c.arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(c)
    }

    /// Write through a temporary file so an interrupted save never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
