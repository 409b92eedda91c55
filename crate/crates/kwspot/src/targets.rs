//! Soft training targets from DTW costs.
//!
//! For every utterance in the untranscribed corpus, the detection cost of each
//! keyword is mapped through `y = -c/2 + 1`, giving a vector in `[0, 1]^L`
//! where 1 means a perfect match. Costs are quantized to `f32` before
//! normalization: that quantized value is the canonical cost, so runs resumed
//! from a cost cache are bit-identical to fresh runs.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::archive::FeatureArchive;
use crate::dtw::{keyword_cost, CostTable, DtwError, ExemplarSet, SweepConfig};
use crate::io::{FormatError, KeywordTable, Stamp};
use crate::ComputeScalar;

pub const TARGET_MAGIC: &[u8; 8] = b"KWSTARG\0";
pub const TARGET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("value {0} outside the valid range [{1}, {2}]")]
    Range(f64, f64, f64),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("duplicate keyword id {0:?}")]
    DuplicateKeyword(String),
    #[error("keyword set dimension {kw} does not match corpus dimension {corpus}")]
    DimensionMismatch { kw: usize, corpus: usize },
}

/// Map a DTW cost in `[0, 2]` to a target score in `[0, 1]`:
/// `y = -c/2 + 1`, so 0 cost gives 1 (perfect match) and 2 gives 0.
pub fn normalize_score(c: ComputeScalar) -> Result<ComputeScalar, TargetError> {
    if !(0.0..=2.0).contains(&c) {
        return Err(TargetError::Range(c, 0.0, 2.0));
    }
    Ok(-c / 2.0 + 1.0)
}

/// Per-corpus matrix of normalized DTW target vectors, one row per utterance
/// in a fixed keyword order.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    table: KeywordTable,
}

impl TargetSet {
    pub fn new(
        keyword_ids: Vec<String>,
        rows: Vec<(String, Vec<f32>)>,
        stamp: Stamp,
    ) -> Result<Self, TargetError> {
        for (_, vals) in &rows {
            for &v in vals {
                if !(0.0..=1.0).contains(&v) {
                    return Err(TargetError::Range(v as f64, 0.0, 1.0));
                }
            }
        }
        Ok(Self {
            table: KeywordTable::new(keyword_ids, rows, stamp)?,
        })
    }

    pub fn keyword_ids(&self) -> &[String] {
        &self.table.keyword_ids
    }

    pub fn rows(&self) -> &[(String, Vec<f32>)] {
        &self.table.rows
    }

    pub fn get(&self, utterance_id: &str) -> Option<&[f32]> {
        self.table.get(utterance_id)
    }

    pub fn stamp(&self) -> Stamp {
        self.table.stamp
    }

    pub fn write(&self, path: &Path) -> Result<(), TargetError> {
        Ok(self.table.write(path, TARGET_MAGIC, TARGET_VERSION)?)
    }

    pub fn read(path: &Path) -> Result<Self, TargetError> {
        let table = KeywordTable::read(path, TARGET_MAGIC, "target set", TARGET_VERSION)?;
        Self::new(table.keyword_ids, table.rows, table.stamp)
    }
}

/// Compute the target set for a corpus, reusing costs from `cache` where
/// present and recomputing the rest. Returns the targets together with the
/// complete cost table (for persisting as the resume point).
///
/// Deterministic given inputs and config, independent of worker count.
pub fn build_targets(
    keywords: &[ExemplarSet<ComputeScalar>],
    corpus: &FeatureArchive,
    cfg: &SweepConfig,
    cache: Option<&CostTable>,
    stamp: Stamp,
) -> Result<(TargetSet, CostTable), TargetError> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    for set in keywords {
        if !seen.insert(set.keyword_id().to_string()) {
            return Err(TargetError::DuplicateKeyword(set.keyword_id().to_string()));
        }
        if set.dim() != corpus.dim() {
            return Err(TargetError::DimensionMismatch {
                kw: set.dim(),
                corpus: corpus.dim(),
            });
        }
    }

    let computed: Vec<(String, Vec<f32>)> = corpus
        .entries()
        .par_iter()
        .map(|entry| {
            let utterance = entry.cast::<ComputeScalar>();
            let costs = keywords
                .iter()
                .map(|set| {
                    if let Some(c) = cache.and_then(|t| t.get(entry.source_id(), set.keyword_id()))
                    {
                        Ok(c)
                    } else {
                        keyword_cost(set, &utterance, cfg).map(|c| c as f32)
                    }
                })
                .collect::<Result<Vec<f32>, DtwError>>()?;
            Ok((entry.source_id().to_string(), costs))
        })
        .collect::<Result<_, DtwError>>()?;

    let mut table = CostTable::new();
    table.stamp = stamp;
    let mut rows = Vec::with_capacity(computed.len());
    for (id, costs) in computed {
        let mut y = Vec::with_capacity(keywords.len());
        for (set, &cost) in keywords.iter().zip(&costs) {
            table.insert(&id, set.keyword_id(), cost);
            y.push(normalize_score(cost as ComputeScalar)? as f32);
        }
        rows.push((id, y));
    }
    let keyword_ids = keywords.iter().map(|s| s.keyword_id().to_string()).collect();
    let targets = TargetSet::new(keyword_ids, rows, stamp)?;
    Ok((targets, table))
}

/// Replace each soft target by 1 if it is at least `theta`, else 0.
pub fn hard_threshold(targets: &TargetSet, theta: f64) -> Result<TargetSet, TargetError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(TargetError::Range(theta, 0.0, 1.0));
    }
    let rows = targets
        .rows()
        .iter()
        .map(|(id, vals)| {
            let hard = vals
                .iter()
                .map(|&v| if v as f64 >= theta { 1.0 } else { 0.0 })
                .collect();
            (id.clone(), hard)
        })
        .collect();
    TargetSet::new(targets.keyword_ids().to_vec(), rows, targets.stamp())
}
