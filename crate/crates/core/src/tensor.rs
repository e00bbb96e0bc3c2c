//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IRSD" | u8 version = 1 | u8 dtype = 1 (f32) | u16 reserved = 0
//! u32 ndim | u32 dims[ndim] | f32 payload[prod(dims)], row-major
//! ```
//!
//! Images are stored with `ndim = 2`, dims `[height, width]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub const MAGIC: &[u8; 4] = b"IRSD";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
const MAX_NDIM: u32 = 8;

/// An n-dimensional `f32` array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(parse_err("magic", "expected \"IRSD\""));
        }
        let version = cur.take(1, "version")?[0];
        if version != VERSION {
            return Err(parse_err("version", format!("unsupported version {version}")));
        }
        let dtype = cur.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(parse_err("dtype", format!("unsupported dtype {dtype}")));
        }
        let reserved = cur.u16("reserved")?;
        if reserved != 0 {
            return Err(parse_err("reserved", format!("must be 0, got {reserved}")));
        }
        let ndim = cur.u32("ndim")?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(parse_err("ndim", format!("{ndim} outside 1..={MAX_NDIM}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = cur.u32("dims")? as usize;
            if d == 0 {
                return Err(parse_err("dims", "zero-length dimension"));
            }
            dims.push(d);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| parse_err("dims", "element count overflows"))?;
        let remaining = bytes.len() - cur.pos;
        if remaining != count * 4 {
            return Err(parse_err(
                "payload",
                format!("expected {} bytes, found {remaining}", count * 4),
            ));
        }
        let data = bytes[cur.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

impl From<&ImageGrid> for Tensor {
    fn from(img: &ImageGrid) -> Self {
        Tensor {
            dims: vec![img.height(), img.width()],
            data: img.data().to_vec(),
        }
    }
}

impl TryFrom<Tensor> for ImageGrid {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        if t.dims.len() != 2 {
            return Err(parse_err("ndim", format!("image needs 2 dims, got {}", t.dims.len())));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("payload", "non-finite value"));
        }
        ImageGrid::new(t.dims[0], t.dims[1], t.data)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    Tensor::from(img).write(path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ImageGrid> {
    ImageGrid::try_from(Tensor::read(path)?)
}

fn parse_err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Parse {
        field,
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(parse_err(field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
