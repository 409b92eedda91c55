//! Independent reference implementations used as test oracles.
//!
//! Everything here is deliberately naive — exhaustive enumeration, O(n^2)
//! pair counting, direct DFTs — and shares no code with the production
//! kernels it is used to check. Only tests and the acceptance suite should
//! call into this module.

use ndarray::{Array2, ArrayView1};

use crate::features::FeatureSequence;
use crate::scalar::Real;

/// DTW cost by exhaustive enumeration of every monotone path.
///
/// Walks all paths from (0,0) to (ta-1, tb-1) under the step set
/// {(1,0),(0,1),(1,1)}, accumulating the frame distance at each visited cell
/// as a left fold, and returns `sum / cells` of the lexicographically best
/// (sum, cells) path. Exponential; only usable for tiny sequences.
pub fn dtw_cost_enumerated<T: Real>(a: &FeatureSequence<T>, b: &FeatureSequence<T>) -> T {
    let dist = cosine_matrix(a, b);
    let mut best: Option<(T, u32)> = None;

    // Depth-first walk carrying the running (sum, cells).
    fn walk<T: Real>(
        dist: &Array2<T>,
        i: usize,
        j: usize,
        sum: T,
        cells: u32,
        best: &mut Option<(T, u32)>,
    ) {
        let (ta, tb) = dist.dim();
        if i == ta - 1 && j == tb - 1 {
            let better = match best {
                None => true,
                Some((bs, bc)) => sum < *bs || (sum == *bs && cells < *bc),
            };
            if better {
                *best = Some((sum, cells));
            }
            return;
        }
        for (di, dj) in [(1usize, 0usize), (0, 1), (1, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < ta && nj < tb {
                walk(dist, ni, nj, sum + dist[(ni, nj)], cells + 1, best);
            }
        }
    }

    walk(&dist, 0, 0, dist[(0, 0)], 1, &mut best);
    let (sum, cells) = best.expect("at least one monotone path exists");
    let c = sum / T::from_f64_c(cells as f64);
    c.max(T::zero()).min(T::from_f64_c(2.0))
}

fn cosine_matrix<T: Real>(a: &FeatureSequence<T>, b: &FeatureSequence<T>) -> Array2<T> {
    let d = |x: ArrayView1<T>, y: ArrayView1<T>| -> T {
        let dot = x.iter().zip(y.iter()).map(|(p, q)| *p * *q).sum::<T>();
        let nx = x.iter().map(|v| *v * *v).sum::<T>().sqrt();
        let ny = y.iter().map(|v| *v * *v).sum::<T>().sqrt();
        let c = T::one() - dot / (nx * ny);
        c.max(T::zero()).min(T::from_f64_c(2.0))
    };
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| d(a.frame(i), b.frame(j)))
}

/// AUC as the tie-corrected Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(s, _)| *s)
        .collect();
    let negatives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| !**l)
        .map(|(s, _)| *s)
        .collect();
    assert!(
        !positives.is_empty() && !negatives.is_empty(),
        "need both classes"
    );
    let mut wins = 0.0;
    for p in &positives {
        for n in &negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positives.len() as f64 * negatives.len() as f64)
}

/// Scalar Adam reference: one parameter, plain textbook update.
#[derive(Debug, Clone)]
pub struct ScalarAdamRef {
    pub m: f64,
    pub v: f64,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl ScalarAdamRef {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: 0.0,
            v: 0.0,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Apply one bias-corrected update to `param` with gradient `g` at
    /// learning rate `lr`; returns the new parameter value.
    pub fn step(&mut self, param: f64, g: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        param - lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// Direct (O(N^2) DFT) MFCC of a single frame, for cross-checking the FFT
/// pipeline. Applies the same Hamming window, mel filterbank, log floor and
/// DCT-II definitions, implemented independently.
pub fn mfcc_frame_reference(
    frame: &[f64],
    sample_rate: f64,
    n_fft: usize,
    n_mels: usize,
    n_ceps: usize,
    low_hz: f64,
    high_hz: f64,
    log_floor: f64,
) -> Vec<f64> {
    use std::f64::consts::PI;
    let win = frame.len();
    // Hamming
    let windowed: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(n, &x)| x * (0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos()))
        .collect();
    // Direct DFT power spectrum
    let n_bins = n_fft / 2 + 1;
    let mut power = vec![0.0; n_bins];
    for (k, p) in power.iter_mut().enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &x) in windowed.iter().enumerate() {
            let phi = 2.0 * PI * k as f64 * n as f64 / n_fft as f64;
            re += x * phi.cos();
            im -= x * phi.sin();
        }
        *p = re * re + im * im;
    }
    // Mel filterbank on bin-center frequencies
    let hz2mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let mel2hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let (mlo, mhi) = (hz2mel(low_hz), hz2mel(high_hz));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel2hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let log_mel: Vec<f64> = (0..n_mels)
        .map(|m| {
            let (fl, fc, fr) = (points[m], points[m + 1], points[m + 2]);
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    let up = (f - fl) / (fc - fl).max(f64::EPSILON);
                    let down = (fr - f) / (fr - fc).max(f64::EPSILON);
                    up.min(down).max(0.0) * p
                })
                .sum();
            e.max(log_floor).ln()
        })
        .collect();
    // DCT-II
    (0..n_ceps)
        .map(|k| {
            (2.0 / n_mels as f64).sqrt()
                * log_mel
                    .iter()
                    .enumerate()
                    .map(|(m, &x)| x * (PI * k as f64 * (m as f64 + 0.5) / n_mels as f64).cos())
                    .sum::<f64>()
        })
        .collect()
}
