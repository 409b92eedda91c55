//! Dynamic-time-warping keyword scoring.
//!
//! Frames are compared with cosine distance, alignments use the step set
//! {(1,0), (0,1), (1,1)}, and the accumulated cost is divided by the number
//! of cells on the optimal path, which keeps every cost in `[0, 2]`.
//! Sweeping an exemplar over an utterance takes the minimum cost over
//! keyword-sized segments starting on a fixed stride grid.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::io::{FormatError, FrameReader, FrameWriter, Stamp};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DtwError {
    #[error("frame dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("zero-norm frame at index {index} of {sequence:?}; cosine distance undefined")]
    ZeroNormFrame { sequence: String, index: usize },
    #[error("band radius {radius} cannot connect sequences of length {a} and {b}")]
    BandTooNarrow { radius: usize, a: usize, b: usize },
    #[error("invalid sweep config: {0}")]
    InvalidConfig(String),
}

/// The recorded repetitions of one keyword type.
#[derive(Debug, Clone)]
pub struct ExemplarSet<T> {
    keyword_id: String,
    exemplars: Vec<FeatureSequence<T>>,
}

impl<T: Real> ExemplarSet<T> {
    pub fn new(
        keyword_id: impl Into<String>,
        exemplars: Vec<FeatureSequence<T>>,
    ) -> Result<Self, DtwError> {
        let keyword_id = keyword_id.into();
        let Some(first) = exemplars.first() else {
            return Err(DtwError::InvalidConfig(format!(
                "keyword {keyword_id:?} needs at least one exemplar"
            )));
        };
        let dim = first.dim();
        for e in &exemplars {
            if e.dim() != dim {
                return Err(DtwError::DimensionMismatch {
                    a: dim,
                    b: e.dim(),
                });
            }
        }
        Ok(Self {
            keyword_id,
            exemplars,
        })
    }

    pub fn keyword_id(&self) -> &str {
        &self.keyword_id
    }

    pub fn exemplars(&self) -> &[FeatureSequence<T>] {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.exemplars[0].dim()
    }

    pub fn cast<U: Real>(&self) -> ExemplarSet<U> {
        ExemplarSet {
            keyword_id: self.keyword_id.clone(),
            exemplars: self.exemplars.iter().map(|e| e.cast()).collect(),
        }
    }
}

/// Sweep geometry: stride between segment starts, segment lengths as factors
/// of the exemplar length, optional alignment band.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub frame_skip: usize,
    pub window_factors: Vec<f64>,
    pub band_width: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            frame_skip: 3,
            window_factors: vec![1.0],
            band_width: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), DtwError> {
        if self.frame_skip == 0 {
            return Err(DtwError::InvalidConfig("frame_skip must be >= 1".into()));
        }
        if self.window_factors.is_empty() || self.window_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(DtwError::InvalidConfig(
                "window_factors must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn dot<T: Real>(x: ArrayView1<T>, y: ArrayView1<T>) -> T {
    x.iter().zip(y.iter()).map(|(a, b)| *a * *b).sum()
}

#[inline]
fn norm<T: Real>(x: ArrayView1<T>) -> T {
    dot(x, x).sqrt()
}

#[inline]
fn clamp02<T: Real>(c: T) -> T {
    c.max(T::zero()).min(T::from_f64_c(2.0))
}

/// Cosine distance `1 - <x,y> / (|x||y|)`, clamped into `[0, 2]`.
pub fn cosine_distance<T: Real>(x: ArrayView1<T>, y: ArrayView1<T>) -> Result<T, DtwError> {
    if x.len() != y.len() {
        return Err(DtwError::DimensionMismatch {
            a: x.len(),
            b: y.len(),
        });
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == T::zero() {
        return Err(DtwError::ZeroNormFrame {
            sequence: "x".into(),
            index: 0,
        });
    }
    if ny == T::zero() {
        return Err(DtwError::ZeroNormFrame {
            sequence: "y".into(),
            index: 0,
        });
    }
    Ok(clamp02(T::one() - dot(x, y) / (nx * ny)))
}

/// Pairwise cosine distances between the frames of two sequences
/// (rows of `a` by rows of `b`). Both cost routes (single pair and sweep)
/// go through this, so their results agree bit-exactly.
fn frame_distance_matrix<T: Real>(
    a: &FeatureSequence<T>,
    b: &FeatureSequence<T>,
) -> Result<Array2<T>, DtwError> {
    if a.dim() != b.dim() {
        return Err(DtwError::DimensionMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let norms_of = |s: &FeatureSequence<T>| -> Result<Vec<T>, DtwError> {
        s.frames()
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let n = norm(r);
                if n == T::zero() {
                    Err(DtwError::ZeroNormFrame {
                        sequence: s.source_id().to_string(),
                        index: i,
                    })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = norms_of(a)?;
    let nb = norms_of(b)?;
    let mut dist = Array2::<T>::zeros((a.len(), b.len()));
    for (i, ra) in a.frames().rows().into_iter().enumerate() {
        for (j, rb) in b.frames().rows().into_iter().enumerate() {
            dist[(i, j)] = clamp02(T::one() - dot(ra, rb) / (na[i] * nb[j]));
        }
    }
    Ok(dist)
}

/// Accumulated cost and cell count of a partial alignment. Ordering is
/// lexicographic (cost first, then fewer cells), matching the conventional
/// diagonal-preferred backtrack when accumulated costs tie.
#[derive(Clone, Copy)]
struct PathCost<T> {
    sum: T,
    cells: u32,
}

impl<T: Real> PathCost<T> {
    fn unreachable_cell() -> Self {
        Self {
            sum: T::infinity(),
            cells: u32::MAX,
        }
    }

    fn better_than(&self, other: &Self) -> bool {
        self.sum < other.sum || (self.sum == other.sum && self.cells < other.cells)
    }
}

/// DP over a column range of a precomputed distance matrix. Returns the
/// (accumulated cost, path cells) of the optimal alignment of all rows
/// against columns `[col_start, col_end)`.
fn align<T: Real>(
    dist: &Array2<T>,
    col_start: usize,
    col_end: usize,
    band: Option<usize>,
) -> Result<(T, u32), DtwError> {
    let ta = dist.nrows();
    let n = col_end - col_start;
    debug_assert!(ta >= 1 && n >= 1);
    if let Some(r) = band {
        if ta.abs_diff(n) > r {
            return Err(DtwError::BandTooNarrow {
                radius: r,
                a: ta,
                b: n,
            });
        }
    }
    let mut prev = vec![PathCost::<T>::unreachable_cell(); n];
    let mut cur = vec![PathCost::<T>::unreachable_cell(); n];
    for i in 0..ta {
        for j in 0..n {
            if let Some(r) = band {
                if i.abs_diff(j) > r {
                    cur[j] = PathCost::unreachable_cell();
                    continue;
                }
            }
            let d = dist[(i, col_start + j)];
            if i == 0 && j == 0 {
                cur[j] = PathCost { sum: d, cells: 1 };
                continue;
            }
            let mut best = PathCost::unreachable_cell();
            if i > 0 && prev[j].better_than(&best) {
                best = prev[j];
            }
            if j > 0 && cur[j - 1].better_than(&best) {
                best = cur[j - 1];
            }
            if i > 0 && j > 0 && prev[j - 1].better_than(&best) {
                best = prev[j - 1];
            }
            cur[j] = PathCost {
                sum: best.sum + d,
                cells: best.cells.saturating_add(1),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let end = prev[n - 1];
    debug_assert!(end.sum.is_finite(), "feasible band must reach the corner");
    Ok((end.sum, end.cells))
}

/// Path-length-normalized DTW alignment cost of two whole sequences.
///
/// The optimal monotone alignment under the step set {(1,0),(0,1),(1,1)} is
/// found by accumulated cosine distance (fewest cells on ties) and its cost is
/// divided by the number of path cells, giving a per-frame cost in `[0, 2]`.
pub fn dtw_cost<T: Real>(
    a: &FeatureSequence<T>,
    b: &FeatureSequence<T>,
    band: Option<usize>,
) -> Result<T, DtwError> {
    let dist = frame_distance_matrix(a, b)?;
    let (sum, cells) = align(&dist, 0, b.len(), band)?;
    Ok(clamp02(sum / T::from_f64_c(cells as f64)))
}

/// Segment start/length grid for one (exemplar, utterance) pair.
fn segment_grid(t_exemplar: usize, t_utterance: usize, cfg: &SweepConfig) -> Vec<(usize, usize)> {
    let lengths: Vec<usize> = cfg
        .window_factors
        .iter()
        .map(|f| (f * t_exemplar as f64).round() as usize)
        .collect();
    let shortest = lengths.iter().copied().min().unwrap_or(0);
    if t_utterance < shortest {
        // Utterance shorter than the shortest window: single whole-utterance segment.
        return vec![(0, t_utterance)];
    }
    let mut segments = Vec::new();
    let mut start = 0;
    while start < t_utterance {
        for &len in &lengths {
            let end = (start + len).min(t_utterance);
            if end - start >= 2 {
                segments.push((start, end));
            }
        }
        start += cfg.frame_skip;
    }
    segments.sort_unstable();
    segments.dedup();
    if segments.is_empty() {
        segments.push((0, t_utterance));
    }
    segments
}

/// Minimum DTW cost of `exemplar` against keyword-sized segments of
/// `utterance`, with segment starts every `frame_skip` frames.
pub fn sweep_min_cost<T: Real>(
    exemplar: &FeatureSequence<T>,
    utterance: &FeatureSequence<T>,
    cfg: &SweepConfig,
) -> Result<T, DtwError> {
    cfg.validate()?;
    let dist = frame_distance_matrix(exemplar, utterance)?;
    let mut best: Option<T> = None;
    for (start, end) in segment_grid(exemplar.len(), utterance.len(), cfg) {
        let (sum, cells) = align(&dist, start, end, cfg.band_width)?;
        let cost = clamp02(sum / T::from_f64_c(cells as f64));
        best = Some(match best {
            Some(b) if b <= cost => b,
            _ => cost,
        });
    }
    Ok(best.expect("segment grid is never empty"))
}

/// Sweep cost of every exemplar in a set against one utterance.
pub fn exemplar_sweep_costs<T: Real>(
    set: &ExemplarSet<T>,
    utterance: &FeatureSequence<T>,
    cfg: &SweepConfig,
) -> Result<Vec<T>, DtwError> {
    set.exemplars()
        .iter()
        .map(|k| sweep_min_cost(k, utterance, cfg))
        .collect()
}

/// Keyword detection cost: the minimum sweep cost over the keyword's
/// exemplars.
pub fn keyword_cost<T: Real>(
    set: &ExemplarSet<T>,
    utterance: &FeatureSequence<T>,
    cfg: &SweepConfig,
) -> Result<T, DtwError> {
    let costs = exemplar_sweep_costs(set, utterance, cfg)?;
    Ok(costs.into_iter().fold(T::infinity(), T::min))
}

/// Mean sweep cost over the keyword's exemplars (the established
/// query-by-example scoring).
pub fn keyword_cost_avg<T: Real>(
    set: &ExemplarSet<T>,
    utterance: &FeatureSequence<T>,
    cfg: &SweepConfig,
) -> Result<T, DtwError> {
    let costs = exemplar_sweep_costs(set, utterance, cfg)?;
    let n = T::from_f64_c(costs.len() as f64);
    Ok(costs.into_iter().sum::<T>() / n)
}

pub const COST_TABLE_MAGIC: &[u8; 8] = b"KWSCOST\0";
pub const COST_TABLE_VERSION: u32 = 1;

/// Persisted table of `(utterance_id, keyword_id) -> cost`, used to resume
/// target generation. Costs are quantized to `f32`, which is also the
/// canonical precision of targets derived from them.
#[derive(Debug, Clone, Default)]
pub struct CostTable {
    entries: BTreeMap<(String, String), f32>,
    pub stamp: Stamp,
}

impl CostTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, utterance_id: &str, keyword_id: &str) -> Option<f32> {
        self.entries
            .get(&(utterance_id.to_string(), keyword_id.to_string()))
            .copied()
    }

    pub fn insert(&mut self, utterance_id: &str, keyword_id: &str, cost: f32) {
        self.entries
            .insert((utterance_id.to_string(), keyword_id.to_string()), cost);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = FrameWriter::new(COST_TABLE_MAGIC, COST_TABLE_VERSION, self.stamp);
        w.put_u64(self.entries.len() as u64);
        for ((utt, kw), cost) in &self.entries {
            w.put_str(utt);
            w.put_str(kw);
            w.put_f32(*cost);
        }
        w.finish(path)
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let mut r = FrameReader::open(path, COST_TABLE_MAGIC, "cost table", COST_TABLE_VERSION)?;
        let stamp = r.stamp;
        let n = r.get_u64()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let utt = r.get_str()?;
            let kw = r.get_str()?;
            let cost = r.get_f32()?;
            if !(0.0..=2.0).contains(&cost) {
                return Err(FormatError::Invalid(format!(
                    "cost {cost} for ({utt}, {kw}) outside [0, 2]"
                )));
            }
            entries.insert((utt, kw), cost);
        }
        r.expect_end()?;
        Ok(Self { entries, stamp })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn seq<T: Real>(frames: Array2<T>) -> FeatureSequence<T> {
        FeatureSequence::new(frames, 10.0, "t").unwrap()
    }

    #[test]
    fn cosine_identical_direction_is_zero() {
        let x = array![1.0, 2.0, 3.0];
        let d: f64 = cosine_distance(x.view(), x.view()).unwrap();
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn cosine_orthogonal_is_one() {
        let x = array![1.0, 0.0];
        let y = array![0.0, 1.0];
        assert_eq!(cosine_distance(x.view(), y.view()).unwrap(), 1.0);
    }

    #[test]
    fn cosine_antipodal_is_two() {
        let x = array![1.0, 0.0];
        let y = array![-1.0, 0.0];
        assert_eq!(cosine_distance(x.view(), y.view()).unwrap(), 2.0);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let x = array![0.0, 0.0];
        let y = array![1.0, 0.0];
        assert!(matches!(
            cosine_distance::<f64>(x.view(), y.view()),
            Err(DtwError::ZeroNormFrame { .. })
        ));
    }

    #[test]
    fn dtw_self_alignment_is_zero() {
        let a = seq(array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [2.0, 1.0]]);
        let c: f64 = dtw_cost(&a, &a, None).unwrap();
        assert!(c.abs() < 1e-15, "self cost {c}");
    }

    #[test]
    fn dtw_single_antipodal_frames_cost_two() {
        let a = seq(array![[1.0, 0.0]]);
        let b = seq(array![[-1.0, 0.0]]);
        assert_eq!(dtw_cost(&a, &b, None).unwrap(), 2.0);
    }

    #[test]
    fn dtw_dimension_mismatch() {
        let a = seq(array![[1.0, 0.0]]);
        let b = seq(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(
            dtw_cost(&a, &b, None),
            Err(DtwError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn band_too_narrow_is_rejected() {
        let a = seq(Array2::from_elem((8, 2), 1.0));
        let b = seq(Array2::from_elem((2, 2), 1.0));
        assert!(matches!(
            dtw_cost(&a, &b, Some(1)),
            Err(DtwError::BandTooNarrow { .. })
        ));
    }

    #[test]
    fn wide_band_matches_unbanded() {
        let a = seq(Array2::from_shape_fn((6, 3), |(i, j)| {
            ((i * 3 + j) as f64 * 0.7).sin() + 1.5
        }));
        let b = seq(Array2::from_shape_fn((9, 3), |(i, j)| {
            ((i * 2 + j) as f64 * 0.4).cos() + 1.5
        }));
        let unbanded = dtw_cost(&a, &b, None).unwrap();
        let banded = dtw_cost(&a, &b, Some(9)).unwrap();
        assert_eq!(unbanded, banded);
    }

    #[test]
    fn sweep_finds_exact_grid_aligned_copy() {
        let exemplar = seq(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        // Utterance: 3 frames of noise, exact copy at frame 3 (grid-aligned
        // with frame_skip 3), 3 frames of noise.
        let mut frames = Array2::<f64>::zeros((9, 2));
        for (i, v) in [
            [0.3, 0.9],
            [0.7, 0.2],
            [0.5, 0.5],
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 1.0],
            [0.8, 0.1],
            [0.2, 0.6],
            [0.9, 0.9],
        ]
        .iter()
        .enumerate()
        {
            frames[(i, 0)] = v[0];
            frames[(i, 1)] = v[1];
        }
        let utterance = seq(frames);
        let cfg = SweepConfig::default();
        let c = sweep_min_cost(&exemplar, &utterance, &cfg).unwrap();
        assert!(c.abs() < 1e-15, "exact copy should cost 0, got {c}");
    }

    #[test]
    fn short_utterance_falls_back_to_whole() {
        let exemplar = seq(Array2::from_shape_fn((10, 2), |(i, _)| i as f64 + 1.0));
        let utterance = seq(array![[1.0, 2.0], [2.0, 1.0], [1.5, 1.5]]);
        let cfg = SweepConfig::default();
        let swept = sweep_min_cost(&exemplar, &utterance, &cfg).unwrap();
        let whole = dtw_cost(&exemplar, &utterance, None).unwrap();
        assert_eq!(swept, whole);
    }

    #[test]
    fn single_exemplar_keyword_cost_equals_sweep() {
        let exemplar = seq(array![[1.0, 0.2], [0.3, 1.0]]);
        let utterance = seq(Array2::from_shape_fn((12, 2), |(i, j)| {
            ((i + j) as f64).sin() + 1.2
        }));
        let set = ExemplarSet::new("kw", vec![exemplar.clone()]).unwrap();
        let cfg = SweepConfig::default();
        assert_eq!(
            keyword_cost(&set, &utterance, &cfg).unwrap(),
            sweep_min_cost(&exemplar, &utterance, &cfg).unwrap()
        );
        assert_eq!(
            keyword_cost_avg(&set, &utterance, &cfg).unwrap(),
            sweep_min_cost(&exemplar, &utterance, &cfg).unwrap()
        );
    }

    #[test]
    fn keyword_cost_is_min_of_individual_sweeps() {
        let mk = |offset: f64| {
            seq(Array2::from_shape_fn((4, 2), |(i, j)| {
                (i as f64 + offset) * 0.3 + j as f64 + 0.5
            }))
        };
        let utterance = seq(Array2::from_shape_fn((20, 2), |(i, j)| {
            ((i * 2 + j) as f64 * 0.37).sin() + 1.5
        }));
        let cfg = SweepConfig::default();
        let exemplars = vec![mk(0.0), mk(1.0), mk(2.0)];
        let individual: Vec<f64> = exemplars
            .iter()
            .map(|e| sweep_min_cost(e, &utterance, &cfg).unwrap())
            .collect();
        let set = ExemplarSet::new("kw", exemplars).unwrap();
        let expect_min = individual.iter().cloned().fold(f64::INFINITY, f64::min);
        let expect_mean = individual.iter().sum::<f64>() / 3.0;
        assert_eq!(keyword_cost(&set, &utterance, &cfg).unwrap(), expect_min);
        assert!((keyword_cost_avg(&set, &utterance, &cfg).unwrap() - expect_mean).abs() < 1e-15);
    }

    #[test]
    fn adding_exemplar_never_increases_cost() {
        let utterance = seq(Array2::from_shape_fn((15, 3), |(i, j)| {
            ((i + 2 * j) as f64 * 0.53).cos() + 1.1
        }));
        let cfg = SweepConfig::default();
        let base: Vec<_> = (0..3)
            .map(|k| {
                seq(Array2::from_shape_fn((5, 3), |(i, j)| {
                    ((i * (k + 2) + j) as f64 * 0.71).sin() + 1.3
                }))
            })
            .collect();
        let small = ExemplarSet::new("kw", base[..2].to_vec()).unwrap();
        let big = ExemplarSet::new("kw", base.clone()).unwrap();
        let c_small = keyword_cost(&small, &utterance, &cfg).unwrap();
        let c_big = keyword_cost(&big, &utterance, &cfg).unwrap();
        assert!(c_big <= c_small);
    }

    #[test]
    fn cost_table_roundtrip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.kwc");
        let mut table = CostTable::new();
        table.insert("u1", "kw_a", 0.5);
        table.insert("u0", "kw_b", 1.25);
        table.write(&path).unwrap();
        let back = CostTable::read(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("u1", "kw_a"), Some(0.5));
        assert_eq!(back.get("u0", "kw_b"), Some(1.25));
        assert_eq!(back.get("u9", "kw_a"), None);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            y in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let xv = ndarray::Array1::from_vec(x);
            let yv = ndarray::Array1::from_vec(y);
            prop_assume!(norm(xv.view()) > 0.0 && norm(yv.view()) > 0.0);
            let dxy = cosine_distance(xv.view(), yv.view()).unwrap();
            let dyx = cosine_distance(yv.view(), xv.view()).unwrap();
            prop_assert_eq!(dxy, dyx);
            prop_assert!((0.0..=2.0).contains(&dxy));
        }

        #[test]
        fn dtw_cost_bounded_and_banded_consistent(
            ta in 1usize..8,
            tb in 1usize..8,
            seed in 0u64..1000,
        ) {
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                ((s % 2000) as f64 - 1000.0) / 250.0
            };
            let mut fa = Array2::<f64>::zeros((ta, 2));
            let mut fb = Array2::<f64>::zeros((tb, 2));
            for v in fa.iter_mut() { *v = next() + 4.1; }
            for v in fb.iter_mut() { *v = next() + 4.1; }
            let a = seq(fa);
            let b = seq(fb);
            let c = dtw_cost(&a, &b, None).unwrap();
            prop_assert!((0.0..=2.0).contains(&c));
            let banded = dtw_cost(&a, &b, Some(ta.max(tb))).unwrap();
            prop_assert_eq!(c, banded);
        }
    }
}
