//! Single-file container of named, typed arrays.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"GRMPARR\0"
//! version  u32 text length + ASCII text ("1")
//! count  u32
//! count × entry:
//!     name  u16 length + UTF-8
//!     dtype u8   (0 f32, 1 f64, 2 u8, 3 u64, 4 utf8 string)
//!     ndim  u8, dims u64 × ndim
//!     payload length u64 + bytes
//! end marker  b"END\0"
//! ```
//!
//! Reads validate every length against the remaining bytes, so a truncated file
//! is reported as a format error and nothing is returned.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{format_err, Error, Result};

const MAGIC: &[u8; 8] = b"GRMPARR\0";
const END: &[u8; 4] = b"END\0";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
    Str(String),
}

impl Data {
    fn code(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::U8(_) => 2,
            Data::U64(_) => 3,
            Data::Str(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::U8(v) => v.len(),
            Data::U64(v) => v.len(),
            Data::Str(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Data,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.put_str("kind", kind);
        c
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| format_err(name, "missing field"))
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        if !matches!(entry.data, Data::Str(_)) {
            assert_eq!(
                entry.shape.iter().product::<usize>(),
                entry.data.len(),
                "shape of `{name}` does not match its payload"
            );
        }
        self.entries.insert(name, entry);
    }

    pub fn put_str(&mut self, name: &str, s: &str) {
        self.entries.insert(
            name.to_string(),
            Entry {
                shape: vec![],
                data: Data::Str(s.to_string()),
            },
        );
    }

    pub fn get_str(&self, name: &str) -> Result<&str> {
        match &self.entry(name)?.data {
            Data::Str(s) => Ok(s),
            _ => Err(format_err(name, "expected a string")),
        }
    }

    /// Checks the `kind` tag written by [`Container::new`].
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.get_str("kind")?;
        if found == kind {
            Ok(())
        } else {
            Err(format_err("kind", format!("expected `{kind}`, found `{found}`")))
        }
    }

    /// Stores `f64` values as `f32` when that is lossless.
    pub fn put_real(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        let lossless = values.iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
        let data = if lossless {
            Data::F32(values.iter().map(|&v| v as f32).collect())
        } else {
            Data::F64(values)
        };
        self.insert(name, Entry { shape, data });
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        self.insert(name, Entry { shape, data: Data::F64(values) });
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.put_f64(name, vec![1], vec![v]);
    }

    pub fn put_array2(&mut self, name: &str, a: &Array2<f64>) {
        self.put_f64(name, vec![a.nrows(), a.ncols()], a.iter().copied().collect());
    }

    pub fn put_real_array2(&mut self, name: &str, a: &Array2<f64>) {
        self.put_real(name, vec![a.nrows(), a.ncols()], a.iter().copied().collect());
    }

    pub fn put_u8(&mut self, name: &str, values: Vec<u8>) {
        self.insert(name, Entry { shape: vec![values.len()], data: Data::U8(values) });
    }

    pub fn put_u64(&mut self, name: &str, values: Vec<u64>) {
        self.insert(name, Entry { shape: vec![values.len()], data: Data::U64(values) });
    }

    /// Real values of any float dtype, widened to `f64`.
    pub fn get_real(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let e = self.entry(name)?;
        let v = match &e.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
            _ => return Err(format_err(name, "expected a float array")),
        };
        Ok((e.shape.clone(), v))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let (_, v) = self.get_real(name)?;
        v.first().copied().ok_or_else(|| format_err(name, "empty scalar"))
    }

    pub fn get_array2(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, v) = self.get_real(name)?;
        if shape.len() != 2 {
            return Err(format_err(name, format!("expected 2 dimensions, found {}", shape.len())));
        }
        Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| format_err(name, e.to_string()))
    }

    pub fn get_array1(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.get_real(name)?.1))
    }

    pub fn get_u8(&self, name: &str) -> Result<&[u8]> {
        match &self.entry(name)?.data {
            Data::U8(v) => Ok(v),
            _ => Err(format_err(name, "expected a u8 array")),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<&[u64]> {
        match &self.entry(name)?.data {
            Data::U64(v) => Ok(v),
            _ => Err(format_err(name, "expected a u64 array")),
        }
    }

    /// Copies every entry of `other` under `prefix.`.
    pub fn nest(&mut self, prefix: &str, other: &Container) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Container {
        let p = format!("{prefix}.");
        Container {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_version(VERSION)
    }

    fn to_bytes_with_version(&self, version: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(version.len() as u32).to_le_bytes());
        out.extend_from_slice(version.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.data.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload: Vec<u8> = match &e.data {
                Data::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                Data::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                Data::U8(v) => v.clone(),
                Data::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                Data::Str(s) => s.as_bytes().to_vec(),
            };
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out.extend_from_slice(END);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(format_err("magic", "not a container file"));
        }
        let vlen = r.u32("version")? as usize;
        let version = std::str::from_utf8(r.take(vlen, "version")?).map_err(|_| format_err("version", "not UTF-8"))?;
        if version != VERSION {
            return Err(format_err("version", format!("unsupported version `{version}`, expected `{VERSION}`")));
        }
        let count = r.u32("count")?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let nlen = r.u16("entry name")? as usize;
            let name = String::from_utf8(r.take(nlen, "entry name")?.to_vec())
                .map_err(|_| format_err(format!("entry {i}"), "name is not UTF-8"))?;
            let code = r.u8(&name)?;
            let ndim = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let plen = r.u64(&name)? as usize;
            let payload = r.take(plen, &name)?;
            let data = decode(code, payload, &name)?;
            let n: usize = shape.iter().product();
            if !matches!(data, Data::Str(_)) && data.len() != n {
                return Err(format_err(&name, format!("payload has {} elements, shape implies {n}", data.len())));
            }
            entries.insert(name, Entry { shape, data });
        }
        if r.take(4, "end marker")? != END {
            return Err(format_err("end marker", "missing"));
        }
        if r.pos != bytes.len() {
            return Err(format_err("end marker", "trailing bytes"));
        }
        Ok(Self { entries })
    }

    /// Writes via a temporary file in the same directory, then renames.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn decode(code: u8, p: &[u8], name: &str) -> Result<Data> {
    let chunks = |w: usize| -> Result<std::slice::ChunksExact<'_, u8>> {
        if p.len() % w != 0 {
            return Err(format_err(name, "payload length is not a multiple of the element size"));
        }
        Ok(p.chunks_exact(w))
    };
    Ok(match code {
        0 => Data::F32(chunks(4)?.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => Data::F64(chunks(8)?.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        2 => Data::U8(p.to_vec()),
        3 => Data::U64(chunks(8)?.map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        4 => Data::Str(String::from_utf8(p.to_vec()).map_err(|_| format_err(name, "string is not UTF-8"))?),
        other => return Err(format_err(name, format!("unknown dtype code {other}"))),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                field: field.to_string(),
                reason: "file truncated".into(),
            }),
        }
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.put_real("a", vec![2, 2], vec![1.0, 2.5, -3.0, 0.125]);
        c.put_real("b", vec![2], vec![0.1, 0.2]);
        c.put_u8("flags", vec![1, 0, 1]);
        c.put_u64("idx", vec![0, 7]);
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(back.entry("a").unwrap().data, Data::F32(_)));
        assert!(matches!(back.entry("b").unwrap().data, Data::F64(_)));
        assert_eq!(back.get_real("b").unwrap().1, vec![0.1, 0.2]);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_zero_is_rejected() {
        let bytes = sample().to_bytes_with_version("0");
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn missing_field_is_named() {
        let err = sample().get_real("rewards").unwrap_err();
        assert!(err.to_string().contains("rewards"));
    }
}
