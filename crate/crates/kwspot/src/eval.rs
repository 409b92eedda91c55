//! Detector evaluation: ROC curves, AUC, EER, confusion counts at a chosen
//! threshold, keyword occurrence statistics and wall-clock benchmarking.
//!
//! Evaluation is utterance-level: a keyword is either present in an utterance
//! or not, and a detector score of at least the threshold counts as a
//! detection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::FeatureArchive;
use crate::features::FeatureSequence;
use crate::io::{FormatError, KeywordTable, Stamp};
use crate::StorageScalar;

pub const SCORE_MAGIC: &[u8; 8] = b"KWSSCOR\0";
pub const SCORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels for keyword {0:?} are all one class; ROC undefined")]
    DegenerateLabels(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("no keywords to evaluate")]
    Empty,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("bad ground-truth line {line}: {detail}")]
    BadTruth { line: usize, detail: String },
}

/// Per-utterance detector scores in a fixed keyword order (same table layout
/// as target sets, different magic).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    table: KeywordTable,
}

impl ScoreSet {
    pub fn new(
        keyword_ids: Vec<String>,
        rows: Vec<(String, Vec<f32>)>,
        stamp: Stamp,
    ) -> Result<Self, EvalError> {
        for (_, vals) in &rows {
            for &v in vals {
                if !(0.0..=1.0).contains(&v) {
                    return Err(EvalError::BadScore(v as f64));
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

    pub fn stamp(&self) -> Stamp {
        self.table.stamp
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        Ok(self.table.write(path, SCORE_MAGIC, SCORE_VERSION)?)
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let table = KeywordTable::read(path, SCORE_MAGIC, "score file", SCORE_VERSION)?;
        Self::new(table.keyword_ids, table.rows, table.stamp)
    }
}

/// Which keywords are truly present in each utterance. Evaluation-only data;
/// nothing in training can see it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    map: BTreeMap<String, BTreeSet<String>>,
    pub stamp: Stamp,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, utterance_id: &str, keywords: impl IntoIterator<Item = String>) {
        self.map
            .entry(utterance_id.to_string())
            .or_default()
            .extend(keywords);
    }

    pub fn contains(&self, utterance_id: &str, keyword_id: &str) -> bool {
        self.map
            .get(utterance_id)
            .is_some_and(|s| s.contains(keyword_id))
    }

    pub fn keywords_of(&self, utterance_id: &str) -> Option<&BTreeSet<String>> {
        self.map.get(utterance_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn utterances(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }

    /// Tab-separated lines: `utterance_id <TAB> kw1,kw2`. Provenance stamps
    /// ride in `#`-comment header lines.
    pub fn write_tsv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::new();
        out.push_str("# kwspot ground truth v1\n");
        if self.stamp.provenance != 0 || self.stamp.data_root != 0 {
            out.push_str(&format!(
                "# provenance {:016x}\n# dataroot {:016x}\n",
                self.stamp.provenance, self.stamp.data_root
            ));
        }
        for (utt, kws) in &self.map {
            let joined = kws.iter().cloned().collect::<Vec<_>>().join(",");
            out.push_str(utt);
            out.push('\t');
            out.push_str(&joined);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| {
            EvalError::Format(FormatError::Io {
                path: path.display().to_string(),
                source,
            })
        })
    }

    pub fn read_tsv(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            EvalError::Format(FormatError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        let mut truth = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("provenance"), Some(hex)) => {
                        truth.stamp.provenance = u64::from_str_radix(hex, 16).unwrap_or(0)
                    }
                    (Some("dataroot"), Some(hex)) => {
                        truth.stamp.data_root = u64::from_str_radix(hex, 16).unwrap_or(0)
                    }
                    _ => {}
                }
                continue;
            }
            let Some((utt, kws)) = line.split_once('\t') else {
                return Err(EvalError::BadTruth {
                    line: i + 1,
                    detail: "missing tab separator".into(),
                });
            };
            let keywords = kws
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.to_string());
            truth.insert(utt, keywords);
        }
        Ok(truth)
    }
}

/// One operating point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// A keyword's full ROC curve with its summary metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
}

/// ROC curve over per-utterance scores for one keyword.
///
/// Thresholds sit at every distinct score (detection rule `score >= t`) plus
/// a sentinel above the maximum; AUC is the trapezoidal integral and the EER
/// is linearly interpolated where the false positive rate crosses the false
/// negative rate.
pub fn compute_roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, EvalError> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must pair up");
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateLabels("<unlabelled>".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push(RocPoint {
        threshold: scores[order[0]] + 1.0,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Consume the whole tie group at this score.
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }

    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
    }

    let (eer, eer_threshold) = interpolate_eer(&points);
    Ok(RocCurve {
        points,
        auc,
        eer,
        eer_threshold,
    })
}

/// Locate the FPR = FNR crossing by walking adjacent curve points and
/// interpolating linearly inside the crossing segment.
fn interpolate_eer(points: &[RocPoint]) -> (f64, f64) {
    // diff(p) = fpr - fnr = fpr - (1 - tpr); runs from -1 to +1 along the curve.
    let diff = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for w in points.windows(2) {
        let (d0, d1) = (diff(&w[0]), diff(&w[1]));
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return (w[0].fpr, w[0].threshold);
            }
            let t = -d0 / (d1 - d0);
            let eer = w[0].fpr + t * (w[1].fpr - w[0].fpr);
            let threshold = w[0].threshold + t * (w[1].threshold - w[0].threshold);
            return (eer, threshold);
        }
    }
    unreachable!("ROC walks from (0,0) to (1,1), so a crossing exists")
}

/// Confusion counts at a detection threshold (`score >= theta` detects).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion_at(scores: &[f64], labels: &[bool], theta: f64) -> Result<Confusion, EvalError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(EvalError::BadThreshold(theta));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= theta, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Unweighted means of per-keyword AUC and EER.
pub fn macro_average(curves: &[RocCurve]) -> Result<(f64, f64), EvalError> {
    if curves.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = curves.len() as f64;
    Ok((
        curves.iter().map(|c| c.auc).sum::<f64>() / n,
        curves.iter().map(|c| c.eer).sum::<f64>() / n,
    ))
}

/// Evaluation result for one keyword.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordReport {
    pub keyword_id: String,
    pub occurrences: usize,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    /// Confusion counts at the keyword-specific EER threshold.
    pub confusion: Confusion,
    pub roc: Vec<RocPoint>,
}

/// Full evaluation of one detector's score file against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub keywords: Vec<KeywordReport>,
    pub macro_auc: f64,
    pub macro_eer: f64,
    pub utterances: usize,
    pub timing: Option<TimingRecord>,
}

/// Score every keyword of a score file against the ground truth.
pub fn evaluate(
    system: &str,
    scores: &ScoreSet,
    truth: &GroundTruth,
) -> Result<EvalReport, EvalError> {
    let mut keywords = Vec::with_capacity(scores.keyword_ids().len());
    let mut auc_sum = 0.0;
    let mut eer_sum = 0.0;
    for (j, kw) in scores.keyword_ids().iter().enumerate() {
        let mut s = Vec::with_capacity(scores.rows().len());
        let mut l = Vec::with_capacity(scores.rows().len());
        for (utt, vals) in scores.rows() {
            s.push(vals[j] as f64);
            l.push(truth.contains(utt, kw));
        }
        let curve = compute_roc(&s, &l).map_err(|e| match e {
            EvalError::DegenerateLabels(_) => EvalError::DegenerateLabels(kw.clone()),
            other => other,
        })?;
        let confusion = confusion_at(&s, &l, curve.eer_threshold.clamp(0.0, 1.0))?;
        auc_sum += curve.auc;
        eer_sum += curve.eer;
        keywords.push(KeywordReport {
            keyword_id: kw.clone(),
            occurrences: l.iter().filter(|&&x| x).count(),
            auc: curve.auc,
            eer: curve.eer,
            eer_threshold: curve.eer_threshold,
            confusion,
            roc: curve.points,
        });
    }
    if keywords.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = keywords.len() as f64;
    Ok(EvalReport {
        system: system.to_string(),
        keywords,
        macro_auc: auc_sum / n,
        macro_eer: eer_sum / n,
        utterances: scores.rows().len(),
        timing: None,
    })
}

/// Number of ground-truth utterances containing each keyword, in the given
/// keyword order.
pub fn keyword_distribution(truth: &GroundTruth, keyword_ids: &[String]) -> Vec<usize> {
    keyword_ids
        .iter()
        .map(|kw| {
            truth
                .utterances()
                .filter(|(_, kws)| kws.contains(kw))
                .count()
        })
        .collect()
}

/// Wall-clock measurement of one detector pass over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub detector: String,
    pub wall_secs: f64,
    pub utterances: usize,
    pub utterances_per_sec: f64,
    /// Audio seconds processed per wall-clock second.
    pub real_time_factor: f64,
    pub workers: usize,
}

impl TimingRecord {
    /// How many times faster `self` processed the same corpus than `other`.
    pub fn speedup_over(&self, other: &TimingRecord) -> f64 {
        other.wall_secs / self.wall_secs
    }
}

/// Time `detector` over every corpus entry. The first `warmup` utterances are
/// run once beforehand and excluded from the measurement.
pub fn benchmark_detector<F>(
    name: &str,
    corpus: &FeatureArchive,
    warmup: usize,
    workers: usize,
    mut detector: F,
) -> TimingRecord
where
    F: FnMut(&FeatureSequence<StorageScalar>) -> Vec<f32>,
{
    for entry in corpus.entries().iter().take(warmup) {
        let _ = detector(entry);
    }
    let start = Instant::now();
    for entry in corpus.entries() {
        let _ = detector(entry);
    }
    let wall_secs = start.elapsed().as_secs_f64().max(1e-9);
    let audio_secs: f64 = corpus.entries().iter().map(|e| e.duration_secs()).sum();
    TimingRecord {
        detector: name.to_string(),
        wall_secs,
        utterances: corpus.len(),
        utterances_per_sec: corpus.len() as f64 / wall_secs,
        real_time_factor: audio_secs / wall_secs,
        workers,
    }
}
