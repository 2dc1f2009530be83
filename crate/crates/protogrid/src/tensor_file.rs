//! `PGTENSR1` container: magic, u32 rank, u32 dims, one dtype byte, then a
//! row-major little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PGTENSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every value widened to binary64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Self { dims, data };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("tensor needs at least one dimension".into()));
        }
        let n: usize = self.dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Config(format!("dims {:?} hold {n} values, got {}", self.dims, self.data.len())));
        }
        let finite = match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::U8(_) => true,
        };
        if !finite {
            return Err(Error::Config("tensor values must be finite".into()));
        }
        if self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Config("dimension exceeds u32".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::with_capacity(13 + 4 * self.dims.len() + self.data.len() * self.data.dtype().width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.data.dtype() as u8);
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(8, "rank must be at least one"));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(r.u32(&format!("dimension {i}"))? as usize);
        }
        let code_at = r.pos;
        let code = r.take(1, "dtype code")?[0];
        let dtype = Dtype::from_code(code).ok_or_else(|| Error::format(code_at, format!("unknown dtype code {code}")))?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes_needed = n.and_then(|n| n.checked_mul(dtype.width()));
        let payload_len = bytes_needed.ok_or_else(|| Error::format(8, "dimensions overflow"))?;
        let payload = r.take(payload_len, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
            Dtype::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.encode()?).map_err(Error::io(path))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Tensor::decode(&bytes)
}
