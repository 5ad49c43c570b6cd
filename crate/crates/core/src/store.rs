//! Frozen base embeddings and their on-disk formats.
//!
//! Two binary layouts are supported, both little-endian:
//!
//! * `AEMB` (one vector per sample): magic, `u32` version = 1, `u64` count,
//!   `u32` dim, then `count * dim` `f32` values, row-major.
//! * `ATOK` (a token sequence per sample): magic, `u32` version = 1,
//!   `u64` count, `u32` dim, `u64` total_tokens, `count + 1` `u64` offsets,
//!   then `total_tokens * dim` `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const AEMB_MAGIC: &[u8; 4] = b"AEMB";
pub const ATOK_MAGIC: &[u8; 4] = b"ATOK";
pub const FORMAT_VERSION: u32 = 1;

const AEMB_HEADER: usize = 4 + 4 + 8 + 4;
const ATOK_HEADER: usize = 4 + 4 + 8 + 4 + 8;

/// Base vectors for every sample of one split, fully loaded.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingStore {
    Dense {
        dim: usize,
        data: Vec<f32>,
    },
    Tokens {
        dim: usize,
        /// `count + 1` entries; sample `i` owns tokens `offsets[i]..offsets[i + 1]`.
        offsets: Vec<u64>,
        data: Vec<f32>,
    },
}

impl EmbeddingStore {
    pub fn dense(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} values do not form rows of dim {dim}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(EmbeddingStore::Dense { dim, data })
    }

    pub fn tokens(dim: usize, offsets: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || offsets.is_empty() || offsets[0] != 0 {
            return Err(Error::Format("token offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("token offsets must be non-decreasing".into()));
        }
        let total = *offsets.last().unwrap() as usize;
        if total * dim != data.len() {
            return Err(Error::Format(format!(
                "offsets declare {total} tokens but payload holds {} values at dim {dim}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(EmbeddingStore::Tokens { dim, offsets, data })
    }

    pub fn count(&self) -> usize {
        match self {
            EmbeddingStore::Dense { dim, data } => data.len() / dim,
            EmbeddingStore::Tokens { offsets, .. } => offsets.len() - 1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingStore::Dense { dim, .. } | EmbeddingStore::Tokens { dim, .. } => *dim,
        }
    }

    pub fn is_tokens(&self) -> bool {
        matches!(self, EmbeddingStore::Tokens { .. })
    }

    /// Row-major `n x dim` block of base vectors for sample `id`
    /// (`n = 1` for dense stores).
    pub fn rows(&self, id: u32) -> Result<&[f32]> {
        let i = id as usize;
        if i >= self.count() {
            return Err(Error::Lookup(id));
        }
        Ok(match self {
            EmbeddingStore::Dense { dim, data } => &data[i * dim..(i + 1) * dim],
            EmbeddingStore::Tokens { dim, offsets, data } => {
                let (a, b) = (offsets[i] as usize, offsets[i + 1] as usize);
                &data[a * dim..b * dim]
            }
        })
    }

    /// Number of rows (tokens) of sample `id`.
    pub fn len_of(&self, id: u32) -> Result<usize> {
        Ok(self.rows(id)?.len() / self.dim())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        match bytes.get(..4) {
            Some(m) if m == AEMB_MAGIC => decode_aemb(&bytes),
            Some(m) if m == ATOK_MAGIC => decode_atok(&bytes),
            _ => Err(Error::Format(format!(
                "{}: unrecognized magic",
                path.display()
            ))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            EmbeddingStore::Dense { dim, data } => {
                let count = data.len() / dim;
                let mut out = Vec::with_capacity(AEMB_HEADER + data.len() * 4);
                out.extend_from_slice(AEMB_MAGIC);
                out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
                out.extend_from_slice(&(count as u64).to_le_bytes());
                out.extend_from_slice(&(*dim as u32).to_le_bytes());
                push_floats(&mut out, data);
                out
            }
            EmbeddingStore::Tokens { dim, offsets, data } => {
                let count = offsets.len() - 1;
                let total = *offsets.last().unwrap();
                let mut out =
                    Vec::with_capacity(ATOK_HEADER + offsets.len() * 8 + data.len() * 4);
                out.extend_from_slice(ATOK_MAGIC);
                out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
                out.extend_from_slice(&(count as u64).to_le_bytes());
                out.extend_from_slice(&(*dim as u32).to_le_bytes());
                out.extend_from_slice(&total.to_le_bytes());
                for o in offsets {
                    out.extend_from_slice(&o.to_le_bytes());
                }
                push_floats(&mut out, data);
                out
            }
        }
    }
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Format(format!("non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

fn push_floats(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated embedding file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("payload size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn read_header(cur: &mut Cursor<'_>) -> Result<(usize, usize)> {
    cur.take(4)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u64()? as usize;
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    Ok((count, dim))
}

fn decode_aemb(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut cur = Cursor { bytes, at: 0 };
    let (count, dim) = read_header(&mut cur)?;
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("header overflow".into()))?;
    let data = cur.floats(n)?;
    cur.finish()?;
    EmbeddingStore::dense(dim, data)
}

fn decode_atok(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut cur = Cursor { bytes, at: 0 };
    let (count, dim) = read_header(&mut cur)?;
    let total = cur.u64()? as usize;
    let offsets = (0..=count).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
    if *offsets.last().unwrap() as usize != total {
        return Err(Error::Format(format!(
            "last offset {} disagrees with total_tokens {total}",
            offsets.last().unwrap()
        )));
    }
    let n = total
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("header overflow".into()))?;
    let data = cur.floats(n)?;
    cur.finish()?;
    EmbeddingStore::tokens(dim, offsets, data)
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aemb_header_layout_is_bit_exact() {
        let store = EmbeddingStore::dense(2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let bytes = store.encode();
        assert_eq!(&bytes[0..4], b"AEMB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 16);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), -2.0);
    }

    #[test]
    fn atok_round_trip_and_rows() {
        let store = EmbeddingStore::tokens(
            2,
            vec![0, 2, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let bytes = store.encode();
        assert_eq!(&bytes[0..4], b"ATOK");
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        let back = decode_atok(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.rows(0).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(back.len_of(1).unwrap(), 1);
        assert!(matches!(back.rows(2), Err(Error::Lookup(2))));
    }

    #[test]
    fn truncated_and_trailing_payloads_are_rejected() {
        let bytes = EmbeddingStore::dense(3, vec![0.0; 6]).unwrap().encode();
        assert!(matches!(
            decode_aemb(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_aemb(&long), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(EmbeddingStore::dense(1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.aemb");
        let store = EmbeddingStore::dense(4, (0..40).map(|i| i as f32 * 0.25).collect()).unwrap();
        store.write(&path).unwrap();
        assert_eq!(EmbeddingStore::read(&path).unwrap(), store);
    }
}
