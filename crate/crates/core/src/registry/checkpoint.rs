//! Binary container for named tensors plus a JSON config section.
//!
//! ```text
//! magic  "ADLKCKPT"
//! u32    version
//! u32    kind            0 = backbone, 1 = adapter
//! u64    config length, then UTF-8 JSON
//! u64    tensor count
//! per tensor:
//!   u64 name length, name bytes
//!   u8  dtype            0 = f64
//!   u64 ndim, then u64 per dimension
//!   f64 values
//! [32]   SHA-256 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADLKCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Backbone,
    Adapter,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Backbone => 0,
            CheckpointKind::Adapter => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Backbone),
            1 => Ok(CheckpointKind::Adapter),
            other => Err(Error::Parse {
                what: "checkpoint".into(),
                msg: format!("unknown kind {other}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// JSON text, kept verbatim so re-encoding reproduces the same bytes.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.code().to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated("shorter than the magic number".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Magic);
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(Error::Truncated("missing checksum".into()));
        }
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        if Sha256::digest(body).as_slice() != &bytes[body.len()..] {
            return Err(Error::Checksum);
        }
        let mut r = Reader {
            buf: body,
            pos: r.pos,
        };
        let kind = CheckpointKind::from_code(r.u32("kind")?)?;
        let config = String::from_utf8(r.bytes("config")?.to_vec()).map_err(|e| Error::Parse {
            what: "checkpoint config".into(),
            msg: e.to_string(),
        })?;
        let n = r.u64("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name =
                String::from_utf8(r.bytes("tensor name")?.to_vec()).map_err(|e| Error::Parse {
                    what: "tensor name".into(),
                    msg: e.to_string(),
                })?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Parse {
                    what: format!("tensor `{name}`"),
                    msg: format!("unsupported dtype {dtype}"),
                });
            }
            let ndim = r.u64("ndim")?;
            let shape = (0..ndim)
                .map(|_| r.u64("dim"))
                .collect::<Result<Vec<usize>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Truncated(format!("tensor `{name}` data")))?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                msg: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self {
            kind,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                msg: format!("expected a {kind:?} checkpoint, found {:?}", self.kind),
            });
        }
        Ok(())
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Truncated(format!("{what} too large")))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u64(what)?;
        self.take(n, what)
    }
}
