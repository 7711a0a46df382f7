//! Binary container shared by dataset records and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u32 | n_arrays u32 | array*
//! array := byte_len u64 | name_len u32 | name utf8 | dtype u8 | rank u32 | dims u32*rank | payload
//! ```
//!
//! `byte_len` counts everything after itself. Payload elements are
//! little-endian IEEE-754 for floating dtypes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
            ArrayData::U8(_) => 3,
            ArrayData::I32(_) => 4,
            ArrayData::U64(_) => 5,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn elem_size(tag: u8) -> Option<usize> {
        match tag {
            1 | 4 => Some(4),
            2 | 5 => Some(8),
            3 => Some(1),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, dims: &[usize], data: ArrayData) -> Self {
        let a = NamedArray { name: name.into(), dims: dims.to_vec(), data };
        debug_assert_eq!(a.dims.iter().product::<usize>(), a.data.len(), "{}", a.name);
        a
    }

    /// Stores a tensor as 32-bit floats.
    pub fn f32_from(name: impl Into<String>, t: &Tensor) -> Self {
        Self::new(name, t.shape(), ArrayData::F32(t.data().iter().map(|&v| v as f32).collect()))
    }

    pub fn f64_from(name: impl Into<String>, t: &Tensor) -> Self {
        Self::new(name, t.shape(), ArrayData::F64(t.data().to_vec()))
    }

    pub fn f64_vec(name: impl Into<String>, dims: &[usize], v: Vec<f64>) -> Self {
        Self::new(name, dims, ArrayData::F64(v))
    }

    pub fn u64_vec(name: impl Into<String>, v: Vec<u64>) -> Self {
        let n = v.len();
        Self::new(name, &[n], ArrayData::U64(v))
    }
}

pub fn encode(magic: &[u8; 4], version: u32, arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let mut body = Vec::new();
        body.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        body.extend_from_slice(a.name.as_bytes());
        body.push(a.data.tag());
        body.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => body.extend_from_slice(v),
            ArrayData::I32(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
        }
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { record: self.record.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decoded container, arrays keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub arrays: BTreeMap<String, NamedArray>,
}

pub fn decode(bytes: &[u8], magic: &[u8; 4], expected_version: u32, record: &str) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0, record };
    let m = r.take(4).map_err(|_| Error::BadMagic { record: record.to_string() })?;
    if m != magic {
        return Err(Error::BadMagic { record: record.to_string() });
    }
    let version = r.u32()?;
    if version != expected_version {
        return Err(Error::Version { record: record.to_string(), found: version, expected: expected_version });
    }
    let n = r.u32()?;
    let corrupt = |reason: String| Error::Corrupt { record: record.to_string(), reason };
    let mut arrays = BTreeMap::new();
    for _ in 0..n {
        let len = r.u64()? as usize;
        let start = r.pos;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("array name is not utf-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        let size = ArrayData::elem_size(tag).ok_or_else(|| corrupt(format!("unknown dtype tag {tag} for {name}")))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count * size)?;
        if r.pos - start != len {
            return Err(corrupt(format!("array {name} length prefix disagrees with contents")));
        }
        let data = match tag {
            1 => ArrayData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            3 => ArrayData::U8(payload.to_vec()),
            4 => ArrayData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => ArrayData::U64(payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        arrays.insert(name.clone(), NamedArray { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after last array".into()));
    }
    Ok(Container { version, arrays })
}

impl Container {
    fn get(&self, name: &str, record: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Corrupt { record: record.to_string(), reason: format!("missing array {name}") })
    }

    /// Reads any floating array as a tensor.
    pub fn tensor(&self, name: &str, record: &str) -> Result<Tensor> {
        let a = self.get(name, record)?;
        let data = match &a.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            _ => {
                return Err(Error::Corrupt { record: record.to_string(), reason: format!("{name} is not floating") })
            }
        };
        Tensor::from_vec(&a.dims, data)
    }

    pub fn f64s(&self, name: &str, record: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.tensor(name, record)?;
        Ok((t.shape().to_vec(), t.into_data()))
    }

    pub fn u64s(&self, name: &str, record: &str) -> Result<Vec<u64>> {
        match &self.get(name, record)?.data {
            ArrayData::U64(v) => Ok(v.clone()),
            _ => Err(Error::Corrupt { record: record.to_string(), reason: format!("{name} is not u64") }),
        }
    }

    pub fn i32s(&self, name: &str, record: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        let a = self.get(name, record)?;
        match &a.data {
            ArrayData::I32(v) => Ok((a.dims.clone(), v.clone())),
            _ => Err(Error::Corrupt { record: record.to_string(), reason: format!("{name} is not i32") }),
        }
    }

    pub fn u8s(&self, name: &str, record: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let a = self.get(name, record)?;
        match &a.data {
            ArrayData::U8(v) => Ok((a.dims.clone(), v.clone())),
            _ => Err(Error::Corrupt { record: record.to_string(), reason: format!("{name} is not u8") }),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            f in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 0..40),
            d in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..40),
            b in proptest::collection::vec(any::<u8>(), 0..40),
            version in 0u32..5,
        ) {
            let arrays = vec![
                NamedArray::new("a/f32", &[f.len()], ArrayData::F32(f.clone())),
                NamedArray::new("b", &[1, d.len()], ArrayData::F64(d.clone())),
                NamedArray::new("c", &[b.len()], ArrayData::U8(b.clone())),
            ];
            let bytes = encode(b"TEST", version, &arrays);
            let c = decode(&bytes, b"TEST", version, "r").unwrap();
            prop_assert_eq!(c.arrays.len(), 3);
            for a in arrays {
                prop_assert_eq!(&c.arrays[&a.name], &a);
            }
        }
    }

    #[test]
    fn detects_bad_magic_version_and_truncation() {
        let arrays = vec![NamedArray::f64_vec("x", &[3], vec![1.0, 2.0, 3.0])];
        let bytes = encode(b"QBEV", 1, &arrays);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, b"QBEV", 1, "r7"), Err(Error::BadMagic { record }) if record == "r7"));
        assert!(matches!(decode(&bytes, b"QBEV", 2, "r"), Err(Error::Version { found: 1, expected: 2, .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3], b"QBEV", 1, "r"), Err(Error::Truncated { .. })));
    }
}
