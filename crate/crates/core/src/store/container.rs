//! Binary tensor container.
//!
//! ```text
//! "TPTE"  version:u32  count:u32
//! count × { name_len:u16  name:utf8  dtype:u8  rank:u8  dims:u32×rank  payload:f32×∏dims }
//! ```
//! All integers and floats are little-endian. `dtype` 0 is `f32`, the only
//! element type.

use std::collections::HashSet;

use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TPTE";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic: not a tensor container")]
    BadMagic,
    #[error("unknown container version {0}")]
    UnknownVersion(u32),
    #[error("truncated payload: {needed} bytes needed at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("unsupported dtype {dtype} for `{name}`")]
    UnsupportedDtype { name: String, dtype: u8 },
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("`{0}` does not fit the container limits")]
    TooLarge(String),
}

impl ContainerError {
    /// Stable short code for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            ContainerError::BadMagic => "bad-magic",
            ContainerError::UnknownVersion(_) => "unknown-version",
            ContainerError::Truncated { .. } => "truncated",
            ContainerError::DuplicateName(_) => "duplicate-name",
            ContainerError::UnsupportedDtype { .. } => "unsupported-dtype",
            ContainerError::InvalidName => "invalid-name",
            ContainerError::TrailingBytes(_) => "trailing-bytes",
            ContainerError::TooLarge(_) => "too-large",
        }
    }
}

pub fn write_container<'a, I>(tensors: I) -> Result<Vec<u8>, ContainerError>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut seen = HashSet::new();
    let count = u32::try_from(tensors.len())
        .map_err(|_| ContainerError::TooLarge("tensor count".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name) {
            return Err(ContainerError::DuplicateName(name.to_string()));
        }
        let too_large = || ContainerError::TooLarge(name.to_string());
        let name_len = u16::try_from(name.len()).map_err(|_| too_large())?;
        let rank = u8::try_from(t.rank()).map_err(|_| too_large())?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| too_large())?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| ContainerError::BadMagic)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::UnknownVersion(version));
    }
    let count = r.u32()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ContainerError::InvalidName)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(ContainerError::UnsupportedDtype { name, dtype });
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ContainerError::TooLarge(name.clone()))?;
        let payload = r.take(n)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).expect("payload length follows dims");
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}
