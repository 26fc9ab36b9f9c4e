//! The `.mnv2` named-tensor archive.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    b"MNV2"
//! version  u32 (= 1)
//! count    u32
//! count × record:
//!     name_len u16, name (UTF-8), ndim u8, dims u32 × ndim, offset u64
//! payload  f32 values, one contiguous run per tensor
//! ```
//!
//! `offset` is the absolute byte position of the tensor's payload within the file.
//! Writers emit records and payloads in lexicographic name order, so equal inputs
//! always produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub const MAGIC: [u8; 4] = *b"MNV2";
pub const VERSION: u32 = 1;

/// A named tensor of arbitrary rank as stored in an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Archive(format!(
                "{} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(ArchiveTensor { dims, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        ArchiveTensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        ArchiveTensor {
            dims: vec![1],
            data: vec![v],
        }
    }
}

impl From<&Tensor> for ArchiveTensor {
    fn from(t: &Tensor) -> Self {
        ArchiveTensor {
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl From<&Matrix> for ArchiveTensor {
    fn from(m: &Matrix) -> Self {
        ArchiveTensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    tensors: BTreeMap<String, ArchiveTensor>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, ArchiveTensor>) -> Self {
        WeightArchive { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Option<ArchiveTensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArchiveTensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, ArchiveTensor> {
        self.tensors
    }

    /// Fetches `name` and checks it has exactly `dims`.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&ArchiveTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.dims != dims {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        read_archive(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, write_archive(self)).map_err(|e| Error::io(path, e))
    }
}

fn header_len(archive: &WeightArchive) -> usize {
    12 + archive
        .tensors
        .iter()
        .map(|(name, t)| 2 + name.len() + 1 + 4 * t.dims.len() + 8)
        .sum::<usize>()
}

/// Serializes in canonical (lexicographic) order.
///
/// Panics if a name exceeds `u16::MAX` bytes, a tensor has more than 255 dims, or a
/// dim exceeds `u32::MAX`; none of these are representable in the format.
pub fn write_archive(archive: &WeightArchive) -> Vec<u8> {
    let payload: usize = archive.tensors.values().map(|t| 4 * t.data.len()).sum();
    let mut out = Vec::with_capacity(header_len(archive) + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(archive.len() as u32).to_le_bytes());
    let mut offset = header_len(archive) as u64;
    for (name, t) in &archive.tensors {
        let name_len = u16::try_from(name.len()).expect("tensor name longer than u16::MAX");
        let ndim = u8::try_from(t.dims.len()).expect("more than 255 dims");
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in &t.dims {
            out.extend_from_slice(&u32::try_from(d).expect("dim exceeds u32").to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for t in archive.tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses and validates an archive: magic, version, unique names, in-bounds and
/// non-overlapping payloads.
pub fn read_archive(bytes: &[u8]) -> Result<WeightArchive> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).map_err(|_| Error::Archive("bad magic".into()))? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;

    struct Record {
        name: String,
        dims: Vec<usize>,
        offset: u64,
        size: u64,
    }
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut elems: u64 = 1;
        for _ in 0..ndim {
            let d = cur.u32()?;
            elems = elems
                .checked_mul(d as u64)
                .ok_or_else(|| Error::Archive(format!("dim overflow in `{name}`")))?;
            dims.push(d as usize);
        }
        let size = elems
            .checked_mul(4)
            .ok_or_else(|| Error::Archive(format!("dim overflow in `{name}`")))?;
        let offset = cur.u64()?;
        records.push(Record {
            name,
            dims,
            offset,
            size,
        });
    }
    let header_end = cur.pos as u64;

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(records.len());
    for r in &records {
        let end = r
            .offset
            .checked_add(r.size)
            .ok_or_else(|| Error::Archive(format!("dim overflow in `{}`", r.name)))?;
        if r.offset < header_end {
            return Err(Error::Archive(format!(
                "payload of `{}` overlaps the header",
                r.name
            )));
        }
        if end > bytes.len() as u64 {
            return Err(Error::Archive(format!(
                "truncated payload for `{}`: needs bytes {}..{}, file has {}",
                r.name,
                r.offset,
                end,
                bytes.len()
            )));
        }
        spans.push((r.offset, end, &r.name));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 && pair[0].1 > pair[0].0 && pair[1].1 > pair[1].0 {
            return Err(Error::Archive(format!(
                "payloads of `{}` and `{}` overlap",
                pair[0].2, pair[1].2
            )));
        }
    }

    let mut tensors = BTreeMap::new();
    for r in records {
        let start = r.offset as usize;
        let data = bytes[start..start + r.size as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let name = r.name;
        if tensors.contains_key(&name) {
            return Err(Error::Archive(format!("duplicate tensor name `{name}`")));
        }
        tensors.insert(name, ArchiveTensor { dims: r.dims, data });
    }
    Ok(WeightArchive { tensors })
}

/// Reference activations for one preprocessed image, stored as an archive with
/// tensors `input` `(1,3,S,S)`, `features` `(1,1280)` and `logits` `(1,k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFixture {
    pub input: Tensor,
    pub features: Matrix,
    pub logits: Matrix,
}

impl ReferenceFixture {
    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let get = |name: &str| {
            archive
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))
        };
        let input = get("input")?;
        let input = match input.dims.as_slice() {
            &[n, c, h, w] => Tensor::from_vec([n, c, h, w], input.data.clone())?,
            other => {
                return Err(Error::TensorShape {
                    name: "input".into(),
                    expected: vec![1, 3, 0, 0],
                    found: other.to_vec(),
                })
            }
        };
        let matrix = |name: &str| -> Result<Matrix> {
            let t = get(name)?;
            match t.dims.as_slice() {
                &[r, c] => Matrix::from_vec(r, c, t.data.clone()),
                other => Err(Error::TensorShape {
                    name: name.into(),
                    expected: vec![1, 0],
                    found: other.to_vec(),
                }),
            }
        };
        Ok(ReferenceFixture {
            input,
            features: matrix("features")?,
            logits: matrix("logits")?,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&WeightArchive::read_file(path)?)
    }
}
