//! `kwspot` is a keyword-spotting toolkit for settings where the only labelled
//! material is a small set of recorded keyword exemplars.
//!
//! The pipeline: extract MFCC features from audio ([`features`]), sweep keyword
//! exemplars over an untranscribed corpus with dynamic time warping ([`dtw`]),
//! turn the alignment costs into soft per-utterance training targets
//! ([`targets`]), and train a 1-D convolutional network on those targets
//! ([`nn`], [`train`]). Detection quality of the trained network and of the
//! DTW detectors themselves is measured side by side with ROC/AUC/EER metrics
//! ([`eval`]). A deterministic synthetic-corpus generator ([`synth`]) provides
//! desk-scale data with known ground truth.
//!
//! Numeric kernels are generic over the scalar type via `num_traits::Float`;
//! exchange formats on disk are fixed to little-endian `f32` ([`StorageScalar`])
//! while the pipeline computes in `f64` ([`ComputeScalar`]).

pub mod archive;
pub mod baselines;
pub mod dtw;
pub mod eval;
pub mod features;
pub mod io;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod targets;
pub mod testkit;
pub mod train;

pub use scalar::Real;

/// Scalar of the on-disk exchange formats (feature archives, cost caches,
/// target sets, score files).
pub type StorageScalar = f32;

/// Scalar the pipeline computes with in memory.
pub type ComputeScalar = f64;

/// Feature sequences as stored in archives.
pub type StoredFeatures = features::FeatureSequence<StorageScalar>;

/// Feature sequences as consumed by the numeric kernels.
pub type ComputeFeatures = features::FeatureSequence<ComputeScalar>;
