//! Acoustic feature extraction: MFCCs from PCM audio, per-utterance
//! mean/variance normalization, and the [`FeatureSequence`] type that the
//! rest of the pipeline consumes.

use ndarray::{Array2, ArrayView1};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio shorter than one analysis window ({samples} samples < {window})")]
    EmptyInput { samples: usize, window: usize },
    #[error("audio contains non-finite samples")]
    CorruptAudio,
    #[error("sequence too short for normalization (need >= 2 frames, got {0})")]
    TooShort(usize),
    #[error("invalid feature matrix: {0}")]
    InvalidFrames(String),
    #[error("invalid mfcc config: {0}")]
    InvalidConfig(String),
    #[error("sample rate {0} Hz below the 8000 Hz minimum")]
    SampleRateTooLow(u32),
    #[error("wav read failed: {0}")]
    Wav(String),
}

/// A variable-length sequence of fixed-dimension feature frames.
///
/// Rows are frames (time), columns are feature dimensions. This is the
/// universal currency of the pipeline: keyword exemplars, corpus utterances
/// and network inputs are all `FeatureSequence`s.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    frames: Array2<T>,
    frame_shift_ms: f32,
    source_id: String,
}

impl<T: Real> FeatureSequence<T> {
    /// Wrap a frame matrix, checking the basic shape/finiteness invariants.
    pub fn new(
        frames: Array2<T>,
        frame_shift_ms: f32,
        source_id: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(FeatureError::InvalidFrames(format!(
                "need T >= 1 and D >= 1, got {} x {}",
                frames.nrows(),
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidFrames(
                "non-finite feature value".into(),
            ));
        }
        if !(frame_shift_ms > 0.0) {
            return Err(FeatureError::InvalidFrames(format!(
                "frame shift must be positive, got {frame_shift_ms}"
            )));
        }
        Ok(Self {
            frames,
            frame_shift_ms,
            source_id: source_id.into(),
        })
    }

    /// Number of frames (T).
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Feature dimension (D).
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frames(&self) -> &Array2<T> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, T> {
        self.frames.row(t)
    }

    pub fn frame_shift_ms(&self) -> f32 {
        self.frame_shift_ms
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Audio duration covered by the sequence, in seconds.
    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 * self.frame_shift_ms as f64 / 1000.0
    }

    /// Sub-range of frames `[start, end)` as a new sequence.
    pub fn segment(&self, start: usize, end: usize) -> Self {
        Self {
            frames: self.frames.slice(ndarray::s![start..end, ..]).to_owned(),
            frame_shift_ms: self.frame_shift_ms,
            source_id: self.source_id.clone(),
        }
    }

    /// Convert the scalar type. `f32 -> f64` is exact.
    pub fn cast<U: Real>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            frames: self.frames.mapv(|v| U::from_f64_c(v.to_f64().unwrap())),
            frame_shift_ms: self.frame_shift_ms,
            source_id: self.source_id.clone(),
        }
    }

    /// True if some frame has zero Euclidean norm (cosine distance hazard).
    pub fn has_zero_frame(&self) -> bool {
        self.frames
            .rows()
            .into_iter()
            .any(|r| r.iter().all(|v| *v == T::zero()))
    }
}

/// MFCC extraction parameters.
///
/// The defaults are 13 cepstra plus deltas and delta-deltas (D = 39) from a
/// 25 ms Hamming window with a 10 ms shift over 26 mel filters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub n_ceps: usize,
    pub n_mels: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub pre_emphasis: f64,
    pub use_deltas: bool,
    pub use_delta_deltas: bool,
    pub delta_window: usize,
    pub low_freq_hz: f64,
    /// Upper filterbank edge; `None` means the Nyquist frequency.
    pub high_freq_hz: Option<f64>,
    /// Floor applied to mel energies before the log, so silence stays finite
    /// and no emitted frame is the all-zero vector.
    pub log_floor: f64,
    /// Apply per-utterance mean/variance normalization after extraction.
    pub cmvn: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_ceps: 13,
            n_mels: 26,
            window_ms: 25.0,
            shift_ms: 10.0,
            pre_emphasis: 0.97,
            use_deltas: true,
            use_delta_deltas: true,
            delta_window: 2,
            low_freq_hz: 0.0,
            high_freq_hz: None,
            log_floor: 1e-10,
            cmvn: true,
        }
    }
}

impl MfccConfig {
    /// Output feature dimension: `n_ceps * (1 + deltas + delta_deltas)`.
    pub fn dim(&self) -> usize {
        self.n_ceps * (1 + self.use_deltas as usize + self.use_delta_deltas as usize)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.n_ceps == 0 || self.n_mels < self.n_ceps {
            return Err(FeatureError::InvalidConfig(format!(
                "need 1 <= n_ceps <= n_mels, got n_ceps={} n_mels={}",
                self.n_ceps, self.n_mels
            )));
        }
        if !(self.window_ms > 0.0) || !(self.shift_ms > 0.0) {
            return Err(FeatureError::InvalidConfig(
                "window and shift must be positive".into(),
            ));
        }
        if !(self.log_floor > 0.0) {
            return Err(FeatureError::InvalidConfig(
                "log floor must be positive".into(),
            ));
        }
        Ok(())
    }

    fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms / 1000.0 * sample_rate as f64).round() as usize
    }

    fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms / 1000.0 * sample_rate as f64).round() as usize
    }
}

/// Number of frames produced for a signal of `len` samples:
/// `floor((len - window) / shift) + 1`, or zero below one window.
pub fn frame_count(len: usize, window: usize, shift: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / shift + 1
    }
}

/// Extract MFCC features from mono PCM samples.
///
/// Internals run at `f64`; the result is cast to the requested scalar.
pub fn extract_mfcc<T: Real>(
    samples: &[f64],
    sample_rate: u32,
    config: &MfccConfig,
    source_id: &str,
) -> Result<FeatureSequence<T>, FeatureError> {
    config.validate()?;
    if sample_rate < 8000 {
        return Err(FeatureError::SampleRateTooLow(sample_rate));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(FeatureError::CorruptAudio);
    }
    let window = config.window_samples(sample_rate);
    let shift = config.shift_samples(sample_rate);
    if samples.len() < window {
        return Err(FeatureError::EmptyInput {
            samples: samples.len(),
            window,
        });
    }

    let n_frames = frame_count(samples.len(), window, shift);
    let emphasized = pre_emphasize(samples, config.pre_emphasis);
    let hamming = hamming_window(window);
    let n_fft = window.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let filterbank = mel_filterbank(
        config.n_mels,
        n_fft,
        sample_rate as f64,
        config.low_freq_hz,
        config
            .high_freq_hz
            .unwrap_or(sample_rate as f64 / 2.0)
            .min(sample_rate as f64 / 2.0),
    );

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    let mut ceps = Array2::<f64>::zeros((n_frames, config.n_ceps));
    for t in 0..n_frames {
        let start = t * shift;
        for i in 0..n_fft {
            let v = if i < window {
                emphasized[start + i] * hamming[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let mel: Vec<f64> = filterbank
            .iter()
            .map(|filt| {
                filt.iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum::<f64>()
                    .max(config.log_floor)
                    .ln()
            })
            .collect();
        let c = dct_ii(&mel, config.n_ceps);
        for (k, v) in c.into_iter().enumerate() {
            ceps[(t, k)] = v;
        }
    }

    let mut blocks = vec![ceps];
    if config.use_deltas {
        let d = deltas(&blocks[0], config.delta_window);
        if config.use_delta_deltas {
            blocks.push(deltas(&d, config.delta_window));
            blocks.insert(1, d);
        } else {
            blocks.push(d);
        }
    }
    let dim = config.dim();
    let mut out = Array2::<f64>::zeros((n_frames, dim));
    for (b, block) in blocks.iter().enumerate() {
        let off = b * config.n_ceps;
        for t in 0..n_frames {
            for k in 0..config.n_ceps {
                out[(t, off + k)] = block[(t, k)];
            }
        }
    }

    let seq = FeatureSequence::new(
        out.mapv(|v| T::from_f64_c(v)),
        config.shift_ms as f32,
        source_id,
    )?;
    Ok(seq)
}

/// Per-utterance cepstral mean and variance normalization.
///
/// Each dimension is centered to zero mean and scaled to unit variance over
/// the sequence (population variance). Dimensions with zero variance are left
/// mean-subtracted only. Idempotent up to floating-point roundoff.
pub fn normalize_cmvn<T: Real>(seq: &FeatureSequence<T>) -> Result<FeatureSequence<T>, FeatureError> {
    let t = seq.len();
    if t < 2 {
        return Err(FeatureError::TooShort(t));
    }
    let n = T::from_f64_c(t as f64);
    let mut frames = seq.frames.clone();
    for mut col in frames.columns_mut() {
        let mean = col.iter().copied().sum::<T>() / n;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| *v * *v).sum::<T>() / n;
        if var > T::zero() {
            let inv_std = var.sqrt().recip();
            col.mapv_inplace(|v| v * inv_std);
        }
    }
    FeatureSequence::new(frames, seq.frame_shift_ms, seq.source_id.clone())
}

fn pre_emphasize(samples: &[f64], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    out.push(samples[0]);
    for i in 1..samples.len() {
        out.push(samples[i] - coeff * samples[i - 1]);
    }
    out
}

fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank evaluated on continuous bin-center frequencies.
fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: f64,
    low_hz: f64,
    high_hz: f64,
) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(low_hz);
    let mel_hi = hz_to_mel(high_hz);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate / n_fft as f64)
        .collect();

    (0..n_mels)
        .map(|m| {
            let (fl, fc, fr) = (points[m], points[m + 1], points[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - fl) / (fc - fl).max(f64::EPSILON);
                    let down = (fr - f) / (fr - fc).max(f64::EPSILON);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// DCT-II with orthonormal-style scaling, truncated to `n_out` coefficients.
fn dct_ii(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len();
    let scale = (2.0 / n as f64).sqrt();
    (0..n_out)
        .map(|k| {
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(m, &x)| {
                        x * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n as f64).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Regression-based delta coefficients with index clamping at the edges.
fn deltas(features: &Array2<f64>, window: usize) -> Array2<f64> {
    let (t_max, d) = features.dim();
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::<f64>::zeros((t_max, d));
    for t in 0..t_max {
        for n in 1..=window {
            let ahead = (t + n).min(t_max - 1);
            let behind = t.saturating_sub(n);
            for c in 0..d {
                out[(t, c)] += n as f64 * (features[(ahead, c)] - features[(behind, c)]);
            }
        }
    }
    out.mapv_inplace(|v| v / denom);
    out
}

/// Decoded mono audio.
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Read a PCM WAV file as mono `f64` samples in `[-1, 1]`.
///
/// Multi-channel audio is downmixed by averaging the channels.
pub fn read_wav(path: &std::path::Path) -> Result<Audio, FeatureError> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| FeatureError::Wav(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(FeatureError::Wav("zero channels".into()));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let max = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / max))
                .collect::<Result<_, _>>()
                .map_err(|e| FeatureError::Wav(e.to_string()))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| FeatureError::Wav(e.to_string()))?,
    };
    let samples: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}
