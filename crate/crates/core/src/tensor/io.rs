//! Little-endian tensor container shared by weight files and dataset records.
//!
//! ```text
//! "MVNW" | version u32 | count u32
//! per tensor: name_len u16 | name (UTF-8) | rank u8 | extents u32 × rank
//!             | precision u8 (0 = f32, 1 = f64) | raw little-endian buffer
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Precision, Scalar, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVNW";
pub const VERSION: u32 = 1;

/// A tensor of either precision as stored in a container file.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Single(t) => t.shape(),
            StoredTensor::Double(t) => t.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            StoredTensor::Single(_) => Precision::Single,
            StoredTensor::Double(_) => Precision::Double,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            StoredTensor::Single(t) => t.cast(),
            StoredTensor::Double(t) => t.clone(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            StoredTensor::Single(t) => t.clone(),
            StoredTensor::Double(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::Single(t)
    }
}

impl From<Tensor<f64>> for StoredTensor {
    fn from(t: Tensor<f64>) -> Self {
        StoredTensor::Double(t)
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::PRECISION.tag());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(items: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::WeightFormat(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        match t {
            StoredTensor::Single(t) => put_tensor(&mut out, t),
            StoredTensor::Double(t) => put_tensor(&mut out, t),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_buffer<T: Scalar>(cur: &mut Cursor<'_>, shape: &[usize]) -> Result<Tensor<T>> {
    let len: usize = shape.iter().product();
    let width = T::PRECISION.byte_width();
    let raw = cur.take(len * width)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::WeightFormat("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut items = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::WeightFormat(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let tensor = match Precision::from_tag(cur.u8()?) {
            Some(Precision::Single) => StoredTensor::Single(read_buffer(&mut cur, &shape)?),
            Some(Precision::Double) => StoredTensor::Double(read_buffer(&mut cur, &shape)?),
            None => return Err(Error::WeightFormat(format!("tensor `{name}` has an unknown precision tag"))),
        };
        items.push((name, tensor));
    }
    if cur.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(items)
}

pub fn write_to<W: Write>(mut w: W, items: &[(String, StoredTensor)]) -> Result<()> {
    let bytes = encode(items)?;
    w.write_all(&bytes)
        .map_err(|e| Error::WeightFormat(e.to_string()))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<(String, StoredTensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::WeightFormat(e.to_string()))?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, items: &[(String, StoredTensor)]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode(items)?).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, StoredTensor)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let items = vec![(
            "a/kernel".to_string(),
            StoredTensor::Single(Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap()),
        )];
        let bytes = encode(&items).unwrap();
        assert_eq!(&bytes[..4], b"MVNW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a/kernel");
        assert_eq!(bytes[22], 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[23..27].try_into().unwrap()), 2);
        assert_eq!(bytes[27], 0); // single precision
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 36);
        assert_eq!(decode(&bytes).unwrap(), items);
    }

    #[test]
    fn rejects_corruption() {
        let items = vec![(
            "x".to_string(),
            StoredTensor::Double(Tensor::new(&[1, 2], vec![0.5, 0.25]).unwrap()),
        )];
        let bytes = encode(&items).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
