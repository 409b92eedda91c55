//! Feature archives: the on-disk container for a corpus of feature sequences.
//!
//! Layout (inside the common frame of [`crate::io`]):
//!
//! ```text
//! dim: u32 | n_entries: u64
//! per entry: id: str | t: u32 | frame_shift_ms: f32 | frames: t * dim f32 (row-major)
//! ```
//!
//! Frames are stored as little-endian `f32`, so `read(write(x)) == x`
//! bit-exactly for `f32` sequences.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;

use crate::features::FeatureSequence;
use crate::io::{FormatError, FrameReader, FrameWriter, Stamp};
use crate::StorageScalar;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"KWSFEAT\0";
pub const ARCHIVE_VERSION: u32 = 1;

/// An ordered, dimension-uniform collection of feature sequences.
#[derive(Debug, Clone)]
pub struct FeatureArchive {
    dim: usize,
    entries: Vec<FeatureSequence<StorageScalar>>,
    stamp: Stamp,
}

impl FeatureArchive {
    /// Assemble an archive, enforcing uniform dimension, unique ids and the
    /// no-zero-frame invariant required by cosine distance.
    pub fn new(entries: Vec<FeatureSequence<StorageScalar>>) -> Result<Self, FormatError> {
        Self::with_stamp(entries, Stamp::default())
    }

    pub fn with_stamp(
        entries: Vec<FeatureSequence<StorageScalar>>,
        stamp: Stamp,
    ) -> Result<Self, FormatError> {
        let Some(first) = entries.first() else {
            return Err(FormatError::Invalid("archive needs at least one entry".into()));
        };
        let dim = first.dim();
        let mut seen = HashSet::new();
        for e in &entries {
            if e.dim() != dim {
                return Err(FormatError::DimensionMismatch {
                    expected: dim,
                    got: e.dim(),
                    context: format!("entry {:?}", e.source_id()),
                });
            }
            if !seen.insert(e.source_id().to_string()) {
                return Err(FormatError::DuplicateId(e.source_id().to_string()));
            }
            if e.has_zero_frame() {
                return Err(FormatError::Invalid(format!(
                    "entry {:?} has an all-zero frame",
                    e.source_id()
                )));
            }
        }
        Ok(Self {
            dim,
            entries,
            stamp,
        })
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

    pub fn entries(&self) -> &[FeatureSequence<StorageScalar>] {
        &self.entries
    }

    pub fn get(&self, source_id: &str) -> Option<&FeatureSequence<StorageScalar>> {
        self.entries.iter().find(|e| e.source_id() == source_id)
    }

    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn set_stamp(&mut self, stamp: Stamp) {
        self.stamp = stamp;
    }

    /// Write the archive to `path` (atomic, checksummed).
    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = FrameWriter::new(ARCHIVE_MAGIC, ARCHIVE_VERSION, self.stamp);
        w.put_u32(self.dim as u32);
        w.put_u64(self.entries.len() as u64);
        for e in &self.entries {
            w.put_str(e.source_id());
            w.put_u32(e.len() as u32);
            w.put_f32(e.frame_shift_ms());
            let frames = e.frames();
            // Row-major contiguous by construction.
            w.put_f32_slice(frames.as_slice().expect("contiguous frames"));
        }
        w.finish(path)
    }

    /// Read and verify an archive from `path`.
    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let mut r = FrameReader::open(path, ARCHIVE_MAGIC, "feature archive", ARCHIVE_VERSION)?;
        let stamp = r.stamp;
        let dim = r.get_u32()? as usize;
        let n = r.get_u64()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.get_str()?;
            let t = r.get_u32()? as usize;
            let shift = r.get_f32()?;
            let data = r.get_f32_vec(t * dim)?;
            let frames = Array2::from_shape_vec((t, dim), data)
                .map_err(|e| FormatError::Invalid(format!("bad frame shape: {e}")))?;
            let seq = FeatureSequence::new(frames, shift, id)
                .map_err(|e| FormatError::Invalid(e.to_string()))?;
            entries.push(seq);
        }
        r.expect_end()?;
        let mut archive = Self::with_stamp(entries, stamp)?;
        if archive.dim != dim {
            return Err(FormatError::DimensionMismatch {
                expected: dim,
                got: archive.dim,
                context: "archive header".into(),
            });
        }
        archive.stamp = stamp;
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(id: &str, frames: Array2<f32>) -> FeatureSequence<f32> {
        FeatureSequence::new(frames, 10.0, id).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.kwf");
        let entries = vec![
            seq("u0", array![[1.0f32, 2.5], [-3.25, 0.125]]),
            seq("u1", array![[0.1f32, -0.2]]),
        ];
        let archive = FeatureArchive::new(entries.clone()).unwrap();
        archive.write(&path).unwrap();
        let back = FeatureArchive::read(&path).unwrap();
        assert_eq!(back.dim(), 2);
        assert_eq!(back.entries().len(), 2);
        for (a, b) in back.entries().iter().zip(&entries) {
            assert_eq!(a.source_id(), b.source_id());
            assert_eq!(a.frames(), b.frames());
            assert_eq!(a.frame_shift_ms().to_bits(), b.frame_shift_ms().to_bits());
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let entries = vec![
            seq("u0", Array2::from_elem((2, 39), 1.0f32)),
            seq("u1", Array2::from_elem((2, 13), 1.0f32)),
        ];
        let err = FeatureArchive::new(entries).unwrap_err();
        assert!(matches!(err, FormatError::DimensionMismatch { expected: 39, got: 13, .. }));
    }

    #[test]
    fn duplicate_id_rejected() {
        let entries = vec![
            seq("u0", array![[1.0f32]]),
            seq("u0", array![[2.0f32]]),
        ];
        assert!(matches!(
            FeatureArchive::new(entries),
            Err(FormatError::DuplicateId(_))
        ));
    }

    #[test]
    fn zero_frame_rejected_at_assembly() {
        let entries = vec![seq("u0", array![[1.0f32, 1.0], [0.0, 0.0]])];
        assert!(matches!(
            FeatureArchive::new(entries),
            Err(FormatError::Invalid(_))
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.kwf");
        let archive =
            FeatureArchive::new(vec![seq("u0", Array2::from_elem((4, 3), 1.5f32))]).unwrap();
        archive.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            FeatureArchive::read(&path),
            Err(FormatError::Corrupt { .. })
        ));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.kwf");
        std::fs::write(&path, b"NOTAFILExxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            FeatureArchive::read(&path),
            Err(FormatError::BadMagic { .. })
        ));
    }
}
