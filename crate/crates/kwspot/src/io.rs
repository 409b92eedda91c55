//! Shared binary-format plumbing: framed files with a magic tag, a format
//! version, provenance stamps and a trailing integrity digest.
//!
//! Every kwspot artifact (feature archive, cost cache, target set, score file,
//! model file) uses the same envelope:
//!
//! ```text
//! magic: 8 bytes | version: u32 | provenance: u64 | data_root: u64 | body ... | digest: 8 bytes
//! ```
//!
//! All integers and floats are little-endian. The digest is the first eight
//! bytes of the SHA-256 of everything preceding it; readers verify it before
//! parsing the body, so truncation or corruption is rejected up front.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors shared by all framed binary formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a {expected} file (bad magic)")]
    BadMagic { path: String, expected: String },
    #[error("{path}: format version {found} not supported (reader understands <= {supported})")]
    Version {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("{path}: corrupt or truncated file ({detail})")]
    Corrupt { path: String, detail: String },
    #[error("feature dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("duplicate source id {0:?} in archive")]
    DuplicateId(String),
    #[error("artifacts come from different corpora (data-root {a:#018x} vs {b:#018x}); refusing to mix")]
    DataRootMismatch { a: u64, b: u64 },
    #[error("{0}")]
    Invalid(String),
}

/// Provenance stamps carried in every artifact header.
///
/// `provenance` identifies the exact stage configuration (chained over the
/// stage's inputs); `data_root` identifies the corpus the artifact ultimately
/// derives from. Zero means unstamped (artifact produced outside `pipeline run`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stamp {
    pub provenance: u64,
    pub data_root: u64,
}

impl Stamp {
    /// Check that two stamped artifacts derive from the same corpus.
    /// Unstamped artifacts (zero data root) pass.
    pub fn check_same_data_root(&self, other: &Stamp) -> Result<(), FormatError> {
        if self.data_root != 0 && other.data_root != 0 && self.data_root != other.data_root {
            return Err(FormatError::DataRootMismatch {
                a: self.data_root,
                b: other.data_root,
            });
        }
        Ok(())
    }
}

/// Hash arbitrary bytes to a u64 stamp (first eight bytes of SHA-256).
pub fn stamp_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Chain a stage's own configuration hash with the stamps of its inputs.
pub fn chain_hash(stage: &str, config_bytes: &[u8], inputs: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(config_bytes);
    for input in inputs {
        h.update(input.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

const DIGEST_LEN: usize = 8;

fn digest8(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    let digest = Sha256::digest(bytes);
    digest[..DIGEST_LEN].try_into().unwrap()
}

/// In-memory writer for a framed file. The whole body is assembled in memory
/// (artifacts are desk-scale), then written atomically via a temp file.
pub struct FrameWriter {
    buf: Vec<u8>,
}

impl FrameWriter {
    pub fn new(magic: &[u8; 8], version: u32, stamp: Stamp) -> Self {
        let mut buf = Vec::with_capacity(4096);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&stamp.provenance.to_le_bytes());
        buf.extend_from_slice(&stamp.data_root.to_le_bytes());
        Self { buf }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn put_f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn put_f64_slice(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Append the digest and write the file atomically (temp + rename).
    pub fn finish(mut self, path: &Path) -> Result<(), FormatError> {
        let digest = digest8(&self.buf);
        self.buf.extend_from_slice(&digest);
        let tmp = path.with_extension("tmp");
        let io_err = |source| FormatError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&self.buf).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }

    /// The framed bytes (digest appended) without touching the filesystem.
    pub fn into_bytes(mut self) -> Vec<u8> {
        let digest = digest8(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

/// Cursor over a verified framed file body.
#[derive(Debug)]
pub struct FrameReader {
    data: Vec<u8>,
    pos: usize,
    path: String,
    pub stamp: Stamp,
    pub version: u32,
}

impl FrameReader {
    /// Read a file, verify magic, version and trailing digest.
    pub fn open(
        path: &Path,
        magic: &[u8; 8],
        expected_kind: &str,
        max_version: u32,
    ) -> Result<Self, FormatError> {
        let data = fs::read(path).map_err(|source| FormatError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(data, &path.display().to_string(), magic, expected_kind, max_version)
    }

    pub fn from_bytes(
        data: Vec<u8>,
        path: &str,
        magic: &[u8; 8],
        expected_kind: &str,
        max_version: u32,
    ) -> Result<Self, FormatError> {
        let corrupt = |detail: &str| FormatError::Corrupt {
            path: path.to_string(),
            detail: detail.to_string(),
        };
        if data.len() < 8 + 4 + 8 + 8 + DIGEST_LEN {
            return Err(corrupt("shorter than header + digest"));
        }
        if &data[..8] != magic {
            return Err(FormatError::BadMagic {
                path: path.to_string(),
                expected: expected_kind.to_string(),
            });
        }
        let body_end = data.len() - DIGEST_LEN;
        let expected = digest8(&data[..body_end]);
        if data[body_end..] != expected {
            return Err(corrupt("integrity digest mismatch"));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
        if version > max_version {
            return Err(FormatError::Version {
                path: path.to_string(),
                found: version,
                supported: max_version,
            });
        }
        let provenance = u64::from_le_bytes(data[12..20].try_into().unwrap());
        let data_root = u64::from_le_bytes(data[20..28].try_into().unwrap());
        Ok(Self {
            data,
            pos: 28,
            path: path.to_string(),
            stamp: Stamp {
                provenance,
                data_root,
            },
            version,
        })
    }

    fn corrupt(&self, detail: &str) -> FormatError {
        FormatError::Corrupt {
            path: self.path.clone(),
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        let body_end = self.data.len() - DIGEST_LEN;
        if self.pos + n > body_end {
            return Err(self.corrupt("record extends past end of body"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_str(&mut self) -> Result<String, FormatError> {
        let len = self.get_u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid utf-8 in string"))
    }

    pub fn get_f32_vec(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn get_f64_vec(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Error unless the body has been consumed exactly.
    pub fn expect_end(&self) -> Result<(), FormatError> {
        if self.pos != self.data.len() - DIGEST_LEN {
            return Err(self.corrupt("trailing bytes after last record"));
        }
        Ok(())
    }
}

/// Shared layout for per-utterance, per-keyword value tables (target sets and
/// score files): a keyword header followed by one row of `f32` values per
/// utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordTable {
    pub keyword_ids: Vec<String>,
    pub rows: Vec<(String, Vec<f32>)>,
    pub stamp: Stamp,
}

impl KeywordTable {
    pub fn new(
        keyword_ids: Vec<String>,
        rows: Vec<(String, Vec<f32>)>,
        stamp: Stamp,
    ) -> Result<Self, FormatError> {
        if keyword_ids.is_empty() {
            return Err(FormatError::Invalid("empty keyword list".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for k in &keyword_ids {
            if !seen.insert(k.clone()) {
                return Err(FormatError::DuplicateId(k.clone()));
            }
        }
        let l = keyword_ids.len();
        let mut seen_rows = std::collections::HashSet::new();
        for (id, vals) in &rows {
            if vals.len() != l {
                return Err(FormatError::DimensionMismatch {
                    expected: l,
                    got: vals.len(),
                    context: format!("row {id:?}"),
                });
            }
            if !seen_rows.insert(id.clone()) {
                return Err(FormatError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            keyword_ids,
            rows,
            stamp,
        })
    }

    pub fn get(&self, utterance_id: &str) -> Option<&[f32]> {
        self.rows
            .iter()
            .find(|(id, _)| id == utterance_id)
            .map(|(_, v)| v.as_slice())
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8], version: u32) -> Result<(), FormatError> {
        let mut w = FrameWriter::new(magic, version, self.stamp);
        w.put_u32(self.keyword_ids.len() as u32);
        for k in &self.keyword_ids {
            w.put_str(k);
        }
        w.put_u64(self.rows.len() as u64);
        for (id, vals) in &self.rows {
            w.put_str(id);
            w.put_f32_slice(vals);
        }
        w.finish(path)
    }

    pub fn read(
        path: &Path,
        magic: &[u8; 8],
        kind: &str,
        version: u32,
    ) -> Result<Self, FormatError> {
        let mut r = FrameReader::open(path, magic, kind, version)?;
        let stamp = r.stamp;
        let l = r.get_u32()? as usize;
        let mut keyword_ids = Vec::with_capacity(l);
        for _ in 0..l {
            keyword_ids.push(r.get_str()?);
        }
        let n = r.get_u64()? as usize;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.get_str()?;
            let vals = r.get_f32_vec(l)?;
            rows.push((id, vals));
        }
        r.expect_end()?;
        Self::new(keyword_ids, rows, stamp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"KWSTEST\0";

    #[test]
    fn roundtrip_preserves_values() {
        let mut w = FrameWriter::new(MAGIC, 1, Stamp::default());
        w.put_u32(42);
        w.put_str("hello");
        w.put_f32_slice(&[1.5, -0.25]);
        let bytes = w.into_bytes();

        let mut r = FrameReader::from_bytes(bytes, "<mem>", MAGIC, "test", 1).unwrap();
        assert_eq!(r.get_u32().unwrap(), 42);
        assert_eq!(r.get_str().unwrap(), "hello");
        assert_eq!(r.get_f32_vec(2).unwrap(), vec![1.5, -0.25]);
        r.expect_end().unwrap();
    }

    #[test]
    fn truncation_is_rejected() {
        let mut w = FrameWriter::new(MAGIC, 1, Stamp::default());
        w.put_f32_slice(&[1.0; 16]);
        let mut bytes = w.into_bytes();
        bytes.truncate(bytes.len() - 8);
        let err = FrameReader::from_bytes(bytes, "<mem>", MAGIC, "test", 1).unwrap_err();
        assert!(matches!(err, FormatError::Corrupt { .. }));
    }

    #[test]
    fn bitflip_is_rejected() {
        let mut w = FrameWriter::new(MAGIC, 1, Stamp::default());
        w.put_u64(7);
        let mut bytes = w.into_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        let err = FrameReader::from_bytes(bytes, "<mem>", MAGIC, "test", 1).unwrap_err();
        assert!(matches!(err, FormatError::Corrupt { .. }));
    }

    #[test]
    fn future_version_is_rejected() {
        let w = FrameWriter::new(MAGIC, 9, Stamp::default());
        let bytes = w.into_bytes();
        let err = FrameReader::from_bytes(bytes, "<mem>", MAGIC, "test", 1).unwrap_err();
        assert!(matches!(err, FormatError::Version { found: 9, .. }));
    }

    #[test]
    fn data_root_mixing_check() {
        let a = Stamp {
            provenance: 1,
            data_root: 10,
        };
        let b = Stamp {
            provenance: 2,
            data_root: 11,
        };
        let unstamped = Stamp::default();
        assert!(a.check_same_data_root(&a).is_ok());
        assert!(a.check_same_data_root(&unstamped).is_ok());
        assert!(a.check_same_data_root(&b).is_err());
    }
}
