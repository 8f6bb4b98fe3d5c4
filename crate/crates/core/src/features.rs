//! Binary store of pooled image feature vectors.
//!
//! Layout (little-endian): magic `FSTR`, version `u32` (= 1), dim `u32`,
//! count `u64`, then per entry a `u16` key length, the UTF-8 key bytes and
//! `dim` `f32` values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSTR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 4 + 8;
pub const PLACEHOLDER_KEY: &str = "__placeholder__";
pub const MAX_KEY_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

fn validate_entry(key: &str, v: &[f32], dim: usize) -> Result<()> {
    if key.is_empty() || key.len() > MAX_KEY_LEN {
        return Err(Error::InvalidArgument(format!(
            "feature key `{key}` must be 1..={MAX_KEY_LEN} bytes"
        )));
    }
    if v.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "feature `{key}` has length {} but dim is {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("feature `{key}`")));
    }
    Ok(())
}

impl FeatureStore {
    pub fn new(dim: usize, entries: IndexMap<String, Vec<f32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be positive".into()));
        }
        for (k, v) in &entries {
            validate_entry(k, v, dim)?;
        }
        if !entries.contains_key(PLACEHOLDER_KEY) {
            return Err(Error::Integrity(format!(
                "feature store lacks reserved key `{PLACEHOLDER_KEY}`"
            )));
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Result<&[f32]> {
        self.entries
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    pub fn placeholder(&self) -> &[f32] {
        &self.entries[PLACEHOLDER_KEY]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_entries(self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice())), self.dim, path)
    }
}

/// File size implied by the format for the given key lengths.
pub fn encoded_len(dim: usize, key_lens: impl IntoIterator<Item = usize>) -> u64 {
    HEADER_LEN
        + key_lens
            .into_iter()
            .map(|k| 2 + k as u64 + 4 * dim as u64)
            .sum::<u64>()
}

/// Writes entries in the given order. Keys must be unique and include the placeholder.
pub fn write_entries<'a, I>(entries: I, dim: usize, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let entries: Vec<(&str, &[f32])> = entries.into_iter().collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "feature store needs at least the `{PLACEHOLDER_KEY}` entry"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (k, v) in &entries {
        validate_entry(k, v, dim)?;
        if !seen.insert(*k) {
            return Err(Error::InvalidArgument(format!("duplicate feature key `{k}`")));
        }
    }
    if !seen.contains(PLACEHOLDER_KEY) {
        return Err(Error::InvalidArgument(format!(
            "feature store needs the `{PLACEHOLDER_KEY}` entry"
        )));
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io)?;
    for (k, v) in &entries {
        w.write_all(&(k.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(k.as_bytes()).map_err(io)?;
        for x in v.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    let file = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(io)?;
    Ok(())
}

/// Writes a store from a key-sorted map.
pub fn write_store(entries: &BTreeMap<String, Vec<f32>>, dim: usize, path: &Path) -> Result<()> {
    write_entries(entries.iter().map(|(k, v)| (k.as_str(), v.as_slice())), dim, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<FeatureStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("feature store: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "feature store: unsupported version {version}"
        )));
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")?;
    let mut entries = IndexMap::new();
    for i in 0..count {
        let key_len = r.u16("key length")? as usize;
        let key_offset = r.pos;
        let key = std::str::from_utf8(r.take(key_len, "key")?)
            .map_err(|_| Error::Format(format!("feature store: key {i} at byte {key_offset} is not UTF-8")))?
            .to_string();
        let raw = r.take(4 * dim, "feature values")?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.insert(key.clone(), v).is_some() {
            return Err(Error::Format(format!("feature store: duplicate key `{key}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "feature store: {} trailing bytes after {count} entries",
            bytes.len() - r.pos
        )));
    }
    FeatureStore::new(dim, entries)
}

pub fn open_store(path: &Path) -> Result<FeatureStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_map(dim: usize) -> BTreeMap<String, Vec<f32>> {
        BTreeMap::from([
            (PLACEHOLDER_KEY.to_string(), vec![0.0; dim]),
            ("ab".to_string(), (0..dim).map(|i| i as f32 * 0.5).collect()),
            ("xyz".to_string(), vec![-1.25; dim]),
        ])
    }

    #[test]
    fn file_size_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_store(&store_map(4), 4, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // 20 + (2+15+16) + (2+2+16) + (2+3+16)
        assert_eq!(len, 94);
        assert_eq!(len, encoded_len(4, [15, 2, 3]));
    }

    #[test]
    fn round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let map = BTreeMap::from([(PLACEHOLDER_KEY.to_string(), vec![0.0; 1024])]);
        write_store(&map, 1024, &path).unwrap();
        let store = open_store(&path).unwrap();
        assert_eq!(store.dim(), 1024);
        assert_eq!(store.placeholder(), &[0.0; 1024][..]);
        assert!(matches!(store.get("zzz"), Err(Error::UnknownKey(k)) if k == "zzz"));
    }

    #[test]
    fn write_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        assert!(write_store(&BTreeMap::new(), 4, &path).is_err());
        let mut bad = store_map(4);
        bad.insert("short".into(), vec![1.0; 3]);
        let err = write_store(&bad, 4, &path).unwrap_err();
        assert!(err.to_string().contains("short"));
        let dup = [(PLACEHOLDER_KEY, &[0.0f32][..]), (PLACEHOLDER_KEY, &[1.0f32][..])];
        assert!(write_entries(dup, 1, &path).is_err());
        let no_placeholder = BTreeMap::from([("a".to_string(), vec![0.0])]);
        assert!(write_store(&no_placeholder, 1, &path).is_err());
    }

    #[test]
    fn read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_store(&store_map(4), 4, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_store(&wrong), Err(Error::Format(_))));

        match decode_store(&bytes[..bytes.len() - 3]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 94 - 16),
            other => panic!("unexpected {other:?}"),
        }

        // A valid file whose only key is not the placeholder.
        let mut other = Vec::new();
        other.extend_from_slice(MAGIC);
        other.extend_from_slice(&1u32.to_le_bytes());
        other.extend_from_slice(&1u32.to_le_bytes());
        other.extend_from_slice(&1u64.to_le_bytes());
        other.extend_from_slice(&1u16.to_le_bytes());
        other.push(b'k');
        other.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(decode_store(&other), Err(Error::Integrity(_))));
    }
}
