//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "PPW1"
//! count      u32
//! per tensor:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   rank     u8
//!   dims     rank x u32
//!   data     prod(dims) x f32, row-major
//! ```
//!
//! Tensors are written in ascending name order, so equal contents always
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PPW1";

/// An n-dimensional f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct NdTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NdTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                name: "ndtensor".into(),
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered map of named tensors.
pub type TensorMap = BTreeMap<String, NdTensor>;

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::format("container", "too many tensors"))?;
    let payload: usize = tensors.values().map(|t| t.data.len() * 4).sum();
    let mut out = Vec::with_capacity(8 + payload + tensors.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::format("container", format!("name too long: {name}")))?;
        let rank = u8::try_from(tensor.shape.len())
            .map_err(|_| Error::format("container", format!("rank too large for {name}")))?;
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(Error::Shape {
                name: name.clone(),
                expected: tensor.shape.clone(),
                found: vec![tensor.data.len()],
            });
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in &tensor.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::format("container", format!("dim too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    "container",
                    format!("truncated while reading {what} at byte {}", self.pos),
                )
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            "container",
            format!("bad magic {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format("container", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("container", format!("shape overflow for {name}")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format("container", "size overflow"))?,
            &format!("data of `{name}`"),
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.insert(name.clone(), NdTensor { shape, data }).is_some() {
            return Err(Error::format("container", format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "container",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(tensors)
}

pub fn write(path: &Path, tensors: &TensorMap) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}
