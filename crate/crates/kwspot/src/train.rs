//! Training of the CNN keyword spotter on DTW-derived soft targets.
//!
//! The API takes only feature archives and target sets, so no transcription
//! can reach training or model selection: the development criterion is the
//! summed cross-entropy against DTW targets, not labels.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::FeatureArchive;
use crate::nn::{
    bce_loss, compact_architecture, full_architecture, AdamState, CnnModel, Gradients, LayerSpec,
    LrSchedule, NnError,
};
use crate::targets::TargetSet;
use crate::ComputeScalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no target row for utterance {0:?}")]
    MissingTarget(String),
    #[error("{skipped} of {total} utterances are shorter than the receptive field (> 10% limit)")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("target keyword lists differ between train and dev sets")]
    KeywordMismatch,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("no usable training utterances")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which layer stack to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Small stack for desk-scale corpora.
    Compact,
    /// The full-scale stack (ten conv layers, two 3000-unit dense layers).
    Full,
}

impl Architecture {
    pub fn layers(self, outputs: usize, use_noise: bool) -> Vec<LayerSpec> {
        match self {
            Architecture::Compact => compact_architecture(outputs, use_noise),
            Architecture::Full => full_architecture(outputs, use_noise),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub use_gaussian_noise: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_max: 60,
            batch_size: 8,
            lr_start: 1e-4,
            lr_end: 1e-5,
            early_stop_patience: 5,
            seed: 0,
            use_gaussian_noise: false,
            architecture: Architecture::Compact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        if self.epochs_max == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs_max and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-utterance summed cross-entropy over the train set.
    pub train_loss: f64,
    /// Mean per-utterance summed cross-entropy over the dev set (eval mode).
    pub dev_loss: f64,
    /// Learning rate at the first optimizer step of the epoch.
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_epoch: usize,
    /// Utterances excluded because they are shorter than the receptive field.
    pub skipped_train: Vec<String>,
    pub skipped_dev: Vec<String>,
}

impl TrainLog {
    /// One JSON object per line: every epoch, then a summary line.
    pub fn write_jsonl(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_dev_loss": self.best_dev_loss,
            "stopped_epoch": self.stopped_epoch,
            "skipped_train": self.skipped_train,
            "skipped_dev": self.skipped_dev,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        std::fs::write(path, out)
    }
}

/// In-memory (input, target) pairs ready for the optimizer.
pub(crate) struct Dataset {
    pub inputs: Vec<Array2<ComputeScalar>>,
    pub targets: Vec<Vec<ComputeScalar>>,
}

/// Pair archive entries with their target rows, excluding utterances shorter
/// than `min_len`. Fails if any utterance has no target row or if more than
/// 10% of the corpus is too short.
fn assemble(
    corpus: &FeatureArchive,
    targets: &TargetSet,
    min_len: usize,
) -> Result<(Dataset, Vec<String>), TrainError> {
    let mut inputs = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for entry in corpus.entries() {
        let Some(row) = targets.get(entry.source_id()) else {
            return Err(TrainError::MissingTarget(entry.source_id().to_string()));
        };
        if entry.len() < min_len {
            skipped.push(entry.source_id().to_string());
            continue;
        }
        inputs.push(entry.cast::<ComputeScalar>().frames().clone());
        rows.push(row.iter().map(|&v| v as ComputeScalar).collect());
    }
    if skipped.len() * 10 > corpus.len() {
        return Err(TrainError::TooManySkipped {
            skipped: skipped.len(),
            total: corpus.len(),
        });
    }
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok((
        Dataset {
            inputs,
            targets: rows,
        },
        skipped,
    ))
}

fn mean_eval_loss(model: &CnnModel<ComputeScalar>, data: &Dataset) -> f64 {
    let mut total = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let out = model.predict(x.view()).expect("validated shapes");
        total += bce_loss(y, out.as_slice().unwrap()).expect("matching lengths");
    }
    total / data.inputs.len() as f64
}

/// Train the CNN-DTW model: Adam with the linear learning-rate schedule,
/// summed cross-entropy per batch, early stopping on dev loss. Returns the
/// checkpoint with the minimum dev loss.
pub fn train_cnn_dtw(
    corpus: &FeatureArchive,
    targets: &TargetSet,
    dev_corpus: &FeatureArchive,
    dev_targets: &TargetSet,
    cfg: &TrainConfig,
) -> Result<(CnnModel<ComputeScalar>, TrainLog), TrainError> {
    cfg.validate()?;
    if targets.keyword_ids() != dev_targets.keyword_ids() {
        return Err(TrainError::KeywordMismatch);
    }
    let outputs = targets.keyword_ids().len();
    let layers = cfg.architecture.layers(outputs, cfg.use_gaussian_noise);
    let model = CnnModel::<ComputeScalar>::new(corpus.dim(), layers, cfg.seed)?;

    let (train_data, skipped_train) = assemble(corpus, targets, model.min_input_len())?;
    let (dev_data, skipped_dev) = assemble(dev_corpus, dev_targets, model.min_input_len())?;

    let steps_per_epoch = train_data.inputs.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule {
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        total_steps: cfg.epochs_max as u64 * steps_per_epoch,
    };
    let fitted = fit(model, &train_data, Some(&dev_data), schedule, cfg)?;
    let mut log = fitted.1;
    log.skipped_train = skipped_train;
    log.skipped_dev = skipped_dev;
    Ok((fitted.0, log))
}

/// The shared optimizer loop. With a dev set, early stopping tracks the
/// minimum dev loss and the best checkpoint is returned; without one, the
/// final model is returned and dev columns mirror the train loss.
pub(crate) fn fit(
    mut model: CnnModel<ComputeScalar>,
    train_data: &Dataset,
    dev_data: Option<&Dataset>,
    schedule: LrSchedule,
    cfg: &TrainConfig,
) -> Result<(CnnModel<ComputeScalar>, TrainLog), TrainError> {
    let mut adam = AdamState::new(&model, schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let n = train_data.inputs.len();
    let mut order: Vec<usize> = (0..n).collect();

    let mut epochs = Vec::new();
    let mut best_dev = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();
    let mut since_improve = 0usize;
    let mut stopped_epoch = 0usize;

    for epoch in 1..=cfg.epochs_max {
        let start = Instant::now();
        let lr_at_epoch_start = adam.current_lr();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in batch {
                let x = &train_data.inputs[i];
                let y = &train_data.targets[i];
                let (out, cache) = model.forward_train(x.view(), &mut rng)?;
                epoch_loss += bce_loss(y, out.as_slice().unwrap())?;
                grads.add_assign(&model.backward(&cache, y)?);
            }
            adam.step(&mut model, &grads);
        }
        let train_loss = epoch_loss / n as f64;
        let dev_loss = match dev_data {
            Some(dev) => mean_eval_loss(&model, dev),
            None => train_loss,
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            lr: lr_at_epoch_start,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        stopped_epoch = epoch;

        if dev_loss < best_dev {
            best_dev = dev_loss;
            best_epoch = epoch;
            best_model = model.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if dev_data.is_some() && since_improve >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let log = TrainLog {
        epochs,
        best_epoch,
        best_dev_loss: best_dev,
        stopped_epoch,
        skipped_train: Vec::new(),
        skipped_dev: Vec::new(),
    };
    let final_model = if dev_data.is_some() { best_model } else { model };
    Ok((final_model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSequence;
    use crate::io::Stamp;
    use crate::nn::LayerSpec;
    use ndarray::Array2;
    use rand::Rng;

    /// Tiny world: utterances either contain a constant "pattern" stretch or
    /// not; targets are 1/0 accordingly.
    fn toy_world(seed: u64, n: usize) -> (FeatureArchive, TargetSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut rows = Vec::new();
        for i in 0..n {
            let planted = i % 2 == 0;
            let frames = Array2::from_shape_fn((30, 4), |(t, d)| {
                if planted && (10..20).contains(&t) {
                    if d == 0 {
                        3.0
                    } else {
                        -2.0
                    }
                } else {
                    rng.random_range(-0.5..0.5) + 0.7
                }
            });
            let id = format!("u{i:03}");
            entries.push(FeatureSequence::<f32>::new(frames, 10.0, &id).unwrap());
            rows.push((id, vec![if planted { 1.0f32 } else { 0.02 }]));
        }
        let archive = FeatureArchive::new(entries).unwrap();
        let targets = TargetSet::new(vec!["kw00".into()], rows, Stamp::default()).unwrap();
        (archive, targets)
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            epochs_max: 50,
            batch_size: 4,
            lr_start: 3e-3,
            lr_end: 3e-4,
            early_stop_patience: 10,
            seed: 1,
            use_gaussian_noise: false,
            architecture: Architecture::Compact,
        }
    }

    #[test]
    fn toy_problem_beats_constant_predictor_baseline() {
        let (train_arc, train_tgt) = toy_world(10, 24);
        let (dev_arc, dev_tgt) = toy_world(11, 12);
        let cfg = fast_cfg();
        let (_, log) = train_cnn_dtw(&train_arc, &train_tgt, &dev_arc, &dev_tgt, &cfg).unwrap();

        // Constant-predictor baseline on the dev targets: best constant is the
        // mean target, loss is the mean binary cross-entropy against it.
        let ys: Vec<f64> = dev_tgt
            .rows()
            .iter()
            .map(|(_, v)| v[0] as f64)
            .collect();
        let p = ys.iter().sum::<f64>() / ys.len() as f64;
        let baseline = ys
            .iter()
            .map(|y| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / ys.len() as f64;
        assert!(
            log.best_dev_loss < baseline,
            "dev loss {} never beat the constant baseline {baseline}",
            log.best_dev_loss
        );
    }

    #[test]
    fn early_stopping_with_patience_one_returns_first_checkpoint() {
        // lr = 0 freezes the model, so dev loss is constant: no epoch after
        // the first improves, and patience 1 stops at epoch 2.
        let (train_arc, train_tgt) = toy_world(20, 8);
        let (dev_arc, dev_tgt) = toy_world(21, 6);
        let cfg = TrainConfig {
            epochs_max: 30,
            early_stop_patience: 1,
            lr_start: 1e-30,
            lr_end: 1e-31,
            ..fast_cfg()
        };
        let (_, log) = train_cnn_dtw(&train_arc, &train_tgt, &dev_arc, &dev_tgt, &cfg).unwrap();
        assert_eq!(log.best_epoch, 1);
        assert_eq!(log.stopped_epoch, 2);
    }

    #[test]
    fn identical_seeds_give_identical_loss_curves() {
        let (train_arc, train_tgt) = toy_world(30, 12);
        let (dev_arc, dev_tgt) = toy_world(31, 8);
        let cfg = TrainConfig {
            epochs_max: 6,
            ..fast_cfg()
        };
        let (_, log_a) = train_cnn_dtw(&train_arc, &train_tgt, &dev_arc, &dev_tgt, &cfg).unwrap();
        let (_, log_b) = train_cnn_dtw(&train_arc, &train_tgt, &dev_arc, &dev_tgt, &cfg).unwrap();
        assert_eq!(log_a.epochs.len(), log_b.epochs.len());
        for (a, b) in log_a.epochs.iter().zip(&log_b.epochs) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-10);
            assert!((a.dev_loss - b.dev_loss).abs() < 1e-10);
        }
    }

    #[test]
    fn returned_model_attains_minimum_logged_dev_loss() {
        let (train_arc, train_tgt) = toy_world(40, 16);
        let (dev_arc, dev_tgt) = toy_world(41, 10);
        let cfg = TrainConfig {
            epochs_max: 10,
            early_stop_patience: 3,
            ..fast_cfg()
        };
        let (model, log) = train_cnn_dtw(&train_arc, &train_tgt, &dev_arc, &dev_tgt, &cfg).unwrap();
        let min_logged = log
            .epochs
            .iter()
            .map(|e| e.dev_loss)
            .fold(f64::INFINITY, f64::min);
        assert!((log.best_dev_loss - min_logged).abs() < 1e-12);
        // Recompute the returned model's dev loss directly.
        let (dev_data, _) = assemble(&dev_arc, &dev_tgt, model.min_input_len()).unwrap();
        let recomputed = mean_eval_loss(&model, &dev_data);
        assert!((recomputed - log.best_dev_loss).abs() < 1e-12);
    }

    #[test]
    fn missing_target_fails_fast() {
        let (train_arc, _) = toy_world(50, 6);
        let bad_targets = TargetSet::new(
            vec!["kw00".into()],
            vec![("u000".into(), vec![1.0])],
            Stamp::default(),
        )
        .unwrap();
        let (dev_arc, dev_tgt) = toy_world(51, 4);
        let err = train_cnn_dtw(&train_arc, &bad_targets, &dev_arc, &dev_tgt, &fast_cfg())
            .unwrap_err();
        assert!(matches!(err, TrainError::MissingTarget(_)));
    }

    #[test]
    fn single_small_step_decreases_sample_loss() {
        // No dropout/noise, so train-mode loss is deterministic.
        let mut model = CnnModel::<f64>::new(
            3,
            vec![
                LayerSpec::Conv1d {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 },
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Sigmoid,
            ],
            7,
        )
        .unwrap();
        let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 3 + j) as f64 * 0.31).sin());
        let y = vec![0.9, 0.1];
        let before = bce_loss(&y, model.predict(x.view()).unwrap().as_slice().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = model.forward_train(x.view(), &mut rng).unwrap();
        let grads = model.backward(&cache, &y).unwrap();
        let nonzero = grads
            .0
            .iter()
            .flatten()
            .any(|g| g.weights.iter().any(|&v| v != 0.0));
        assert!(nonzero, "gradient vanished on a mismatched prediction");
        let mut adam = AdamState::new(
            &model,
            LrSchedule {
                lr_start: 1e-6,
                lr_end: 1e-6,
                total_steps: 1,
            },
        );
        adam.step(&mut model, &grads);
        let after = bce_loss(&y, model.predict(x.view()).unwrap().as_slice().unwrap()).unwrap();
        assert!(after < before, "loss {before} -> {after} did not decrease");
    }

    #[test]
    fn train_log_jsonl_roundtrips_line_per_epoch() {
        let (train_arc, train_tgt) = toy_world(60, 8);
        let (dev_arc, dev_tgt) = toy_world(61, 6);
        let cfg = TrainConfig {
            epochs_max: 3,
            ..fast_cfg()
        };
        let (_, log) = train_cnn_dtw(&train_arc, &train_tgt, &dev_arc, &dev_tgt, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.log.jsonl");
        log.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), log.epochs.len() + 1);
        for line in &lines {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }
}
