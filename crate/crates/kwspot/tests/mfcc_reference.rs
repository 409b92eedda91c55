//! Cross-check of the FFT-based MFCC pipeline against a direct-DFT
//! per-frame reference implementation.

use kwspot::features::{extract_mfcc, MfccConfig};
use kwspot::testkit::mfcc_frame_reference;

fn tone(freq: f64, secs: f64, rate: u32) -> Vec<f64> {
    (0..(secs * rate as f64) as usize)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect()
}

#[test]
fn pipeline_matches_direct_dft_reference_per_frame() {
    let rate = 16000u32;
    let cfg = MfccConfig {
        use_deltas: false,
        use_delta_deltas: false,
        ..MfccConfig::default()
    };
    let samples = tone(523.25, 0.3, rate);
    let seq = extract_mfcc::<f64>(&samples, rate, &cfg, "tone").unwrap();

    // Rebuild each frame's cepstra independently: same pre-emphasis, then a
    // direct DFT instead of the FFT path.
    let window = 400usize;
    let shift = 160usize;
    let mut emphasized = Vec::with_capacity(samples.len());
    emphasized.push(samples[0]);
    for i in 1..samples.len() {
        emphasized.push(samples[i] - cfg.pre_emphasis * samples[i - 1]);
    }
    let n_frames = seq.len();
    for t in 0..n_frames {
        let frame = &emphasized[t * shift..t * shift + window];
        let reference = mfcc_frame_reference(
            frame,
            rate as f64,
            512,
            cfg.n_mels,
            cfg.n_ceps,
            cfg.low_freq_hz,
            rate as f64 / 2.0,
            cfg.log_floor,
        );
        for (k, &r) in reference.iter().enumerate() {
            let got = seq.frames()[(t, k)];
            assert!(
                (got - r).abs() < 1e-8,
                "frame {t} coeff {k}: pipeline {got} vs reference {r}"
            );
        }
    }
}

#[test]
fn two_tones_distinguished_by_reference_and_pipeline() {
    let rate = 16000u32;
    let cfg = MfccConfig {
        use_deltas: false,
        use_delta_deltas: false,
        ..MfccConfig::default()
    };
    let a = extract_mfcc::<f64>(&tone(440.0, 0.2, rate), rate, &cfg, "a").unwrap();
    let b = extract_mfcc::<f64>(&tone(880.0, 0.2, rate), rate, &cfg, "b").unwrap();
    let mut max_diff = 0.0f64;
    for (x, y) in a.frames().iter().zip(b.frames().iter()) {
        max_diff = max_diff.max((x - y).abs());
    }
    assert!(max_diff > 1e-6);
}
