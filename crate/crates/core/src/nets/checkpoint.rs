//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "FANCKPT\0"
//! version   u32
//! hdr_len   u32, followed by hdr_len bytes of JSON (CheckpointHeader)
//! count     u32
//! count x { name_len u16, name, dtype u8 (1 = f64), trainable u8,
//!           ndim u8, ndim x u32 dims, prod(dims) x f64 }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::NetConfig;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{FanError, Result};

pub const MAGIC: &[u8; 8] = b"FANCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub net: NetConfig,
    pub stage: String,
    pub step: u64,
    pub store_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(net: &NetConfig, stage: &str, step: u64, store: ParamStore) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                net: net.clone(),
                stage: stage.to_string(),
                step,
                store_version: store.version,
            },
            store,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let hdr = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        out.extend_from_slice(&hdr);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, p) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(u8::from(p.trainable));
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != MAGIC {
            return Err(FanError::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FanError::format(
                origin,
                format!("checkpoint format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| FanError::format(origin, format!("header: {e}")))?;
        if header.format_version != version {
            return Err(FanError::format(origin, "header version disagrees with preamble"));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| FanError::format(origin, "tensor name is not utf-8"))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(FanError::format(origin, format!("unsupported dtype {dtype}")));
            }
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(name.clone(), Tensor::from_vec(&shape, data)?)?;
            if !trainable {
                store.freeze(&[name.as_str()])?;
            }
        }
        if r.pos != bytes.len() {
            return Err(FanError::format(origin, "trailing bytes after tensors"));
        }
        store.version = header.store_version;
        Ok(Checkpoint { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| FanError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| FanError::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| FanError::io(path, e))
    }

    /// Loads a checkpoint and, when `expected` is given, rejects it unless it
    /// was written for exactly that network configuration.
    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FanError::io(path, e))?;
        let ck = Self::from_bytes(&bytes, path)?;
        if let Some(cfg) = expected {
            if &ck.header.net != cfg {
                return Err(FanError::format(
                    path,
                    format!("network config mismatch: checkpoint {:?}, run {:?}", ck.header.net, cfg),
                ));
            }
        }
        Ok(ck)
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FanError::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
