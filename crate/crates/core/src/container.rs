//! Named-array binary container shared by head assets and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! <magic line, terminated by '\n'>
//! u32 metadata length, metadata bytes (UTF-8, usually JSON, may be empty)
//! u32 array count
//! repeated:
//!   u32 name length, name bytes
//!   u8  dtype (0 = f32, 1 = f64, 2 = i32, 3 = u32)
//!   u8  rank, then rank x u64 dimensions
//!   payload, row-major
//! ```

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic header: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file while reading {field} at byte offset {offset}")]
    Truncated { field: String, offset: usize },
    #[error("unknown dtype code {code} for array {field:?}")]
    BadDtype { field: String, code: u8 },
    #[error("metadata is not valid UTF-8")]
    BadMetadata,
    #[error("array {field:?}: {reason}")]
    Field { field: String, reason: String },
    #[error("missing array {0:?}")]
    Missing(String),
    #[error("trailing {0} bytes after last array")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::I32(_) => 2,
            ArrayData::U32(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: &str, shape: Vec<usize>, data: ArrayData) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.to_string(),
            shape,
            data,
        }
    }

    fn field_err(&self, reason: impl Into<String>) -> ContainerError {
        ContainerError::Field {
            field: self.name.clone(),
            reason: reason.into(),
        }
    }

    /// Checks the shape against `expected`; `None` entries match any size.
    pub fn expect_shape(&self, expected: &[Option<usize>]) -> Result<(), ContainerError> {
        let ok = self.shape.len() == expected.len()
            && self
                .shape
                .iter()
                .zip(expected)
                .all(|(s, e)| e.map_or(true, |e| e == *s));
        if ok {
            Ok(())
        } else {
            Err(self.field_err(format!(
                "shape {:?} does not match expected {:?}",
                self.shape, expected
            )))
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], ContainerError> {
        match &self.data {
            ArrayData::F32(v) => Ok(v),
            _ => Err(self.field_err("expected f32 payload")),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64], ContainerError> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(self.field_err("expected f64 payload")),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32], ContainerError> {
        match &self.data {
            ArrayData::I32(v) => Ok(v),
            _ => Err(self.field_err("expected i32 payload")),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32], ContainerError> {
        match &self.data {
            ArrayData::U32(v) => Ok(v),
            _ => Err(self.field_err("expected u32 payload")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: String,
    pub metadata: String,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(magic: &str) -> Self {
        Self {
            magic: magic.to_string(),
            metadata: String::new(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, ContainerError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.magic.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.code());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ContainerError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, expected_magic: &str) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected_magic)
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &str) -> Result<Self, ContainerError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let header = cur.take(expected_magic.len() + 1, "magic header")?;
        if &header[..expected_magic.len()] != expected_magic.as_bytes() || header[expected_magic.len()] != b'\n' {
            return Err(ContainerError::BadMagic {
                expected: expected_magic.to_string(),
                found: String::from_utf8_lossy(header).trim_end().to_string(),
            });
        }
        let meta_len = cur.u32("metadata length")? as usize;
        let meta = cur.take(meta_len, "metadata")?;
        let metadata = String::from_utf8(meta.to_vec()).map_err(|_| ContainerError::BadMetadata)?;
        let count = cur.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for idx in 0..count {
            let field = format!("array #{idx} name");
            let name_len = cur.u32(&field)? as usize;
            let name = String::from_utf8_lossy(cur.take(name_len, &field)?).into_owned();
            let code = cur.take(1, &format!("{name} dtype"))?[0];
            let rank = cur.take(1, &format!("{name} rank"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64(&format!("{name} dimensions"))? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ContainerError::Field {
                    field: name.clone(),
                    reason: "dimension product overflows".into(),
                })?;
            let width = match code {
                0 | 2 | 3 => 4,
                1 => 8,
                _ => return Err(ContainerError::BadDtype { field: name, code }),
            };
            let nbytes = len.checked_mul(width).ok_or_else(|| ContainerError::Field {
                field: name.clone(),
                reason: "payload size overflows".into(),
            })?;
            let payload = cur.take(nbytes, &format!("{name} payload"))?;
            let data = match code {
                0 => ArrayData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => ArrayData::U32(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(ContainerError::Trailing(bytes.len() - cur.pos));
        }
        Ok(Self {
            magic: expected_magic.to_string(),
            metadata,
            arrays,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Truncated {
                field: field.to_string(),
                offset: self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn sample() -> Container {
        let mut c = Container::new("TEST v1");
        c.metadata = "{\"a\":1}".into();
        c.push(NamedArray::new("x", vec![2, 2], ArrayData::F32(vec![1.0, 2.0, 3.0, 4.5])));
        c.push(NamedArray::new("p", vec![3], ArrayData::I32(vec![-1, 0, 1])));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(), "TEST v1").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_reports_field() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3], "TEST v1").unwrap_err();
        match err {
            ContainerError::Truncated { field, .. } => assert_eq!(field, "p payload"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_magic() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes, "OTHER v1"),
            Err(ContainerError::BadMagic { .. })
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(
            meta in "[ -~]{0,40}",
            f in proptest::collection::vec(proptest::num::f64::ANY, 0..50),
            i in proptest::collection::vec(any::<i32>(), 0..20),
        ) {
            let mut c = Container::new("PROP v1");
            c.metadata = meta;
            c.push(NamedArray::new("f", vec![f.len()], ArrayData::F64(f)));
            c.push(NamedArray::new("i", vec![i.len()], ArrayData::I32(i)));
            let back = Container::from_bytes(&c.to_bytes(), "PROP v1").unwrap();
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}
