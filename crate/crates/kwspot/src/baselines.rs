//! The comparison systems: a keyword-only CNN classifier trained on isolated
//! exemplars plus random negative windows, and the two direct DTW detectors
//! (DTW-QbyE averages sweep costs over exemplars, DTW-KS takes the minimum).
//! All detectors emit scores in `[0, 1]`, so one evaluation path serves them
//! all.

use std::collections::HashSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::FeatureArchive;
use crate::dtw::{exemplar_sweep_costs, DtwError, ExemplarSet, SweepConfig};
use crate::eval::{EvalError, ScoreSet};
use crate::features::FeatureSequence;
use crate::io::Stamp;
use crate::nn::{CnnModel, LrSchedule, NnError};
use crate::scalar::Real;
use crate::targets::{normalize_score, TargetError};
use crate::train::{TrainConfig, TrainError, TrainLog};
use crate::ComputeScalar;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("exemplar {0:?} invalid for the classifier window: {1}")]
    InvalidExemplar(String, String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// How negative windows for the keyword-only classifier are drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeSamplingConfig {
    /// Negative windows per keyword per epoch; 0 means "as many as there are
    /// positives" (balanced).
    pub negatives_per_keyword: usize,
    /// Fixed classifier input length in frames.
    pub window_frames: usize,
    pub seed: u64,
}

impl Default for NegativeSamplingConfig {
    fn default() -> Self {
        Self {
            negatives_per_keyword: 0,
            window_frames: 60,
            seed: 0,
        }
    }
}

/// Crop or pad a sequence to exactly `window` frames: longer sequences are
/// center-cropped, shorter ones are padded with their edge frames.
pub fn fit_to_window<T: Real>(seq: &FeatureSequence<T>, window: usize) -> Array2<T> {
    let t = seq.len();
    let frames = seq.frames();
    if t == window {
        return frames.clone();
    }
    if t > window {
        let start = (t - window) / 2;
        return frames.slice(ndarray::s![start..start + window, ..]).to_owned();
    }
    let pad = window - t;
    let left = pad / 2;
    Array2::from_shape_fn((window, seq.dim()), |(i, j)| {
        let src = i.saturating_sub(left).min(t - 1);
        frames[(src, j)]
    })
}

/// Train the keyword-only CNN classifier on the isolated exemplars plus
/// negative windows drawn from the corpus each epoch (without replacement
/// within an epoch where the corpus allows it). Exemplar `i` of keyword `j`
/// gets the one-hot target `e_j`; negatives get the all-zero vector.
pub fn train_cnn_classifier(
    keywords: &[ExemplarSet<ComputeScalar>],
    negatives_source: &FeatureArchive,
    neg_cfg: &NegativeSamplingConfig,
    train_cfg: &TrainConfig,
) -> Result<(CnnModel<ComputeScalar>, TrainLog), BaselineError> {
    train_cfg.validate()?;
    if keywords.is_empty() {
        return Err(BaselineError::InvalidConfig("no keyword sets".into()));
    }
    let l = keywords.len();
    let dim = keywords[0].dim();
    let layers = train_cfg
        .architecture
        .layers(l, train_cfg.use_gaussian_noise);
    let mut model = CnnModel::<ComputeScalar>::new(dim, layers, train_cfg.seed)?;
    if neg_cfg.window_frames < model.min_input_len() {
        return Err(BaselineError::InvalidConfig(format!(
            "window of {} frames is below the receptive field of {}",
            neg_cfg.window_frames,
            model.min_input_len()
        )));
    }

    let mut positives: Vec<(Array2<ComputeScalar>, Vec<ComputeScalar>)> = Vec::new();
    for (j, set) in keywords.iter().enumerate() {
        for exemplar in set.exemplars() {
            if exemplar.is_empty() {
                return Err(BaselineError::InvalidExemplar(
                    exemplar.source_id().to_string(),
                    "empty".into(),
                ));
            }
            let mut target = vec![0.0; l];
            target[j] = 1.0;
            positives.push((fit_to_window(exemplar, neg_cfg.window_frames), target));
        }
    }
    let negatives_per_epoch = if neg_cfg.negatives_per_keyword == 0 {
        positives.len()
    } else {
        neg_cfg.negatives_per_keyword * l
    };

    let mut adam = crate::nn::AdamState::new(
        &model,
        LrSchedule {
            lr_start: train_cfg.lr_start,
            lr_end: train_cfg.lr_end,
            total_steps: train_cfg.epochs_max as u64
                * ((positives.len() + negatives_per_epoch).div_ceil(train_cfg.batch_size)) as u64,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ neg_cfg.seed.rotate_left(17));
    let zero_target = vec![0.0; l];
    let mut epochs = Vec::new();
    let corpus = negatives_source.entries();

    for epoch in 1..=train_cfg.epochs_max {
        let start = std::time::Instant::now();
        let lr_at_epoch_start = adam.current_lr();
        // Fresh negatives each epoch, no repeated (utterance, start) pair
        // within the epoch while enough distinct windows exist.
        let mut seen = HashSet::new();
        let mut samples: Vec<(Array2<ComputeScalar>, &Vec<ComputeScalar>)> = positives
            .iter()
            .map(|(x, y)| (x.clone(), y))
            .collect();
        for _ in 0..negatives_per_epoch {
            let mut window = None;
            for _attempt in 0..16 {
                let u = rng.random_range(0..corpus.len());
                let entry = &corpus[u];
                let start = if entry.len() > neg_cfg.window_frames {
                    rng.random_range(0..=entry.len() - neg_cfg.window_frames)
                } else {
                    0
                };
                if seen.insert((u, start)) {
                    window = Some((u, start));
                    break;
                }
                window = Some((u, start));
            }
            let (u, start) = window.expect("attempts always produce a window");
            let entry = &corpus[u];
            let x = if entry.len() >= neg_cfg.window_frames {
                entry
                    .cast::<ComputeScalar>()
                    .segment(start, start + neg_cfg.window_frames)
                    .frames()
                    .clone()
            } else {
                fit_to_window(&entry.cast::<ComputeScalar>(), neg_cfg.window_frames)
            };
            samples.push((x, &zero_target));
        }

        let mut order: Vec<usize> = (0..samples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut grads = crate::nn::Gradients::zeros_like(&model);
            for &i in batch {
                let (x, y) = &samples[i];
                let (out, cache) = model.forward_train(x.view(), &mut rng)?;
                epoch_loss += crate::nn::bce_loss(y, out.as_slice().unwrap())?;
                grads.add_assign(&model.backward(&cache, y)?);
            }
            adam.step(&mut model, &grads);
        }
        let train_loss = epoch_loss / samples.len() as f64;
        epochs.push(crate::train::EpochRecord {
            epoch,
            train_loss,
            dev_loss: train_loss,
            lr: lr_at_epoch_start,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }

    let best_epoch = epochs.len();
    let best_dev_loss = epochs.last().map(|e| e.dev_loss).unwrap_or(f64::NAN);
    Ok((
        model,
        TrainLog {
            epochs,
            best_epoch,
            best_dev_loss,
            stopped_epoch: best_epoch,
            skipped_train: Vec::new(),
            skipped_dev: Vec::new(),
        },
    ))
}

/// Slide a fixed window over the utterance and keep the per-keyword maximum
/// score. Utterances shorter than the window become a single padded window;
/// a trailing window at `T - window` covers the tail when the stride grid
/// does not.
pub fn detect_cnn_sliding(
    model: &CnnModel<ComputeScalar>,
    utterance: &FeatureSequence<ComputeScalar>,
    window: usize,
    stride: usize,
) -> Result<Vec<f64>, BaselineError> {
    if stride == 0 {
        return Err(BaselineError::InvalidConfig("stride must be >= 1".into()));
    }
    let t = utterance.len();
    let l = model.output_len();
    let mut best = vec![f64::NEG_INFINITY; l];
    let mut consider = |frames: ndarray::ArrayView2<ComputeScalar>| -> Result<(), BaselineError> {
        let out = model.predict(frames)?;
        for (b, v) in best.iter_mut().zip(out.iter()) {
            *b = b.max(*v);
        }
        Ok(())
    };
    if t < window {
        let padded = fit_to_window(utterance, window);
        consider(padded.view())?;
    } else {
        let mut start = 0;
        let mut covered_tail = false;
        while start + window <= t {
            consider(utterance.frames().slice(ndarray::s![start..start + window, ..]))?;
            covered_tail = start + window == t;
            start += stride;
        }
        if !covered_tail {
            consider(utterance.frames().slice(ndarray::s![t - window..t, ..]))?;
        }
    }
    Ok(best)
}

/// Whole-utterance forward pass of the DTW-supervised model. Utterances
/// shorter than the receptive field are edge-padded up to it.
pub fn detect_cnn_dtw(
    model: &CnnModel<ComputeScalar>,
    utterance: &FeatureSequence<ComputeScalar>,
) -> Result<Vec<f64>, BaselineError> {
    let out = if utterance.len() < model.min_input_len() {
        let padded = fit_to_window(utterance, model.min_input_len());
        model.predict(padded.view())?
    } else {
        model.predict(utterance.frames().view())?
    };
    Ok(out.to_vec())
}

/// Per-exemplar sweep costs against one utterance, with the min (DTW-KS) and
/// mean (DTW-QbyE) scores derived from the same sweep values.
fn dtw_scores_for(
    set: &ExemplarSet<ComputeScalar>,
    utterance: &FeatureSequence<ComputeScalar>,
    cfg: &SweepConfig,
) -> Result<(f64, f64), BaselineError> {
    let costs = exemplar_sweep_costs(set, utterance, cfg)?;
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    // The float sum can round a hair below the minimum when every cost ties.
    let mean = (costs.iter().sum::<f64>() / costs.len() as f64).max(min);
    Ok((normalize_score(min)?, normalize_score(mean)?))
}

/// DTW-KS scores (minimum sweep cost over exemplars, normalized).
pub fn detect_dtw_ks(
    sets: &[ExemplarSet<ComputeScalar>],
    utterance: &FeatureSequence<ComputeScalar>,
    cfg: &SweepConfig,
) -> Result<Vec<f64>, BaselineError> {
    sets.iter()
        .map(|s| dtw_scores_for(s, utterance, cfg).map(|(ks, _)| ks))
        .collect()
}

/// DTW-QbyE scores (mean sweep cost over exemplars, normalized).
pub fn detect_dtw_qbye(
    sets: &[ExemplarSet<ComputeScalar>],
    utterance: &FeatureSequence<ComputeScalar>,
    cfg: &SweepConfig,
) -> Result<Vec<f64>, BaselineError> {
    sets.iter()
        .map(|s| dtw_scores_for(s, utterance, cfg).map(|(_, qbye)| qbye))
        .collect()
}

/// A detector that can score a whole corpus.
#[derive(Debug, Clone)]
pub enum Detector {
    /// Keyword-only classifier with its sliding window geometry.
    CnnSliding {
        model: CnnModel<ComputeScalar>,
        window: usize,
        stride: usize,
    },
    /// DTW-supervised model applied to whole utterances.
    CnnDtw { model: CnnModel<ComputeScalar> },
    DtwKs {
        sets: Vec<ExemplarSet<ComputeScalar>>,
        sweep: SweepConfig,
    },
    DtwQbye {
        sets: Vec<ExemplarSet<ComputeScalar>>,
        sweep: SweepConfig,
    },
}

impl Detector {
    pub fn keyword_ids(&self) -> Option<Vec<String>> {
        match self {
            Detector::DtwKs { sets, .. } | Detector::DtwQbye { sets, .. } => {
                Some(sets.iter().map(|s| s.keyword_id().to_string()).collect())
            }
            _ => None,
        }
    }

    /// Score one utterance (given at compute precision).
    pub fn score(
        &self,
        utterance: &FeatureSequence<ComputeScalar>,
    ) -> Result<Vec<f64>, BaselineError> {
        match self {
            Detector::CnnSliding {
                model,
                window,
                stride,
            } => detect_cnn_sliding(model, utterance, *window, *stride),
            Detector::CnnDtw { model } => detect_cnn_dtw(model, utterance),
            Detector::DtwKs { sets, sweep } => detect_dtw_ks(sets, utterance, sweep),
            Detector::DtwQbye { sets, sweep } => detect_dtw_qbye(sets, utterance, sweep),
        }
    }
}

/// Score every corpus utterance with a detector, in parallel, producing a
/// score file. Output is deterministic regardless of worker count.
pub fn score_corpus(
    detector: &Detector,
    keyword_ids: &[String],
    corpus: &FeatureArchive,
    stamp: Stamp,
) -> Result<ScoreSet, BaselineError> {
    let rows: Vec<(String, Vec<f32>)> = corpus
        .entries()
        .par_iter()
        .map(|entry| {
            let utterance = entry.cast::<ComputeScalar>();
            let scores = detector.score(&utterance)?;
            Ok((
                entry.source_id().to_string(),
                scores.iter().map(|&v| v as f32).collect(),
            ))
        })
        .collect::<Result<_, BaselineError>>()?;
    Ok(ScoreSet::new(keyword_ids.to_vec(), rows, stamp)?)
}
