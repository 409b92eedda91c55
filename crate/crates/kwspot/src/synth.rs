//! Deterministic synthetic corpus generation.
//!
//! Keyword prototypes are smooth random trajectories in feature space.
//! Corpus utterances are distractor trajectories with time-warped, noisy
//! copies of prototypes planted at recorded positions; exemplar recordings of
//! each keyword get an additional constant channel offset, imitating keywords
//! recorded under different audio conditions than the corpus. Everything is a
//! pure function of the seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::FeatureArchive;
use crate::dtw::ExemplarSet;
use crate::eval::GroundTruth;
use crate::features::FeatureSequence;
use crate::io::Stamp;
use crate::StorageScalar;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("generation failed: {0}")]
    Generation(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of keyword types (L).
    pub n_keywords: usize,
    /// Recorded repetitions per keyword (N).
    pub exemplars_per_keyword: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Feature dimension of the generated sequences.
    pub dim: usize,
    /// Inclusive utterance length range in frames.
    pub utterance_len: (usize, usize),
    /// Inclusive keyword prototype length range in frames.
    pub keyword_len: (usize, usize),
    /// Probability that an utterance contains a given keyword.
    pub keyword_prior: f64,
    /// Time-stretch factor range applied to planted keywords and exemplars.
    pub warp_range: (f64, f64),
    /// Additive Gaussian noise on plants and exemplars.
    pub noise_stddev: f64,
    /// Amplitude of the per-style smooth distortion ("speaker" variation).
    /// Each keyword has `n_styles` style variants; every planted copy and
    /// every exemplar renders one of them, so a copy matches same-style
    /// exemplars far better than the rest of the set.
    pub style_stddev: f64,
    /// Number of style variants per keyword.
    pub n_styles: usize,
    /// Magnitude of the constant offset applied to exemplars only.
    pub channel_offset: f64,
    /// Plant start positions snap to multiples of this stride (1 = anywhere).
    pub align_plants_to: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_keywords: 5,
            exemplars_per_keyword: 10,
            train_utterances: 400,
            dev_utterances: 150,
            test_utterances: 300,
            dim: 12,
            utterance_len: (80, 150),
            keyword_len: (16, 28),
            keyword_prior: 0.35,
            warp_range: (0.8, 1.25),
            noise_stddev: 0.3,
            style_stddev: 0.4,
            n_styles: 4,
            channel_offset: 0.5,
            align_plants_to: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_keywords == 0 || self.exemplars_per_keyword == 0 || self.dim == 0 {
            return err("counts must be >= 1".into());
        }
        if self.train_utterances == 0 || self.dev_utterances == 0 || self.test_utterances == 0 {
            return err("every split needs at least one utterance".into());
        }
        if self.keyword_len.0 < 2 || self.keyword_len.0 > self.keyword_len.1 {
            return err(format!("bad keyword length range {:?}", self.keyword_len));
        }
        if self.utterance_len.0 < 2 || self.utterance_len.0 > self.utterance_len.1 {
            return err(format!("bad utterance length range {:?}", self.utterance_len));
        }
        if !(self.warp_range.0 > 0.0) || self.warp_range.0 > self.warp_range.1 {
            return err(format!("bad warp range {:?}", self.warp_range));
        }
        if !(self.keyword_prior > 0.0 && self.keyword_prior < 1.0) {
            return err(format!("keyword prior {} not in (0, 1)", self.keyword_prior));
        }
        if !(self.noise_stddev >= 0.0) || !(self.channel_offset >= 0.0) || !(self.style_stddev >= 0.0) {
            return err("noise, style and offset must be >= 0".into());
        }
        if self.n_styles == 0 {
            return err("n_styles must be >= 1".into());
        }
        if self.align_plants_to == 0 {
            return err("align_plants_to must be >= 1".into());
        }
        let longest_warped = (self.warp_range.1 * self.keyword_len.1 as f64).round() as usize;
        if self.utterance_len.0 < longest_warped {
            return err(format!(
                "shortest utterance ({}) cannot hold the longest warped keyword ({longest_warped})",
                self.utterance_len.0
            ));
        }
        Ok(())
    }
}

/// Where a keyword copy was planted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub utterance_id: String,
    pub keyword_id: String,
    pub start: usize,
    pub len: usize,
}

/// One generated split: features, truth, and the exact plant positions.
#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub name: String,
    pub archive: FeatureArchive,
    pub truth: GroundTruth,
    pub plants: Vec<PlantRecord>,
}

/// A full generated corpus.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub keywords: Vec<ExemplarSet<StorageScalar>>,
    pub train: SynthSplit,
    pub dev: SynthSplit,
    pub test: SynthSplit,
}

/// Smooth random trajectory: Gaussian anchors every few frames, linearly
/// interpolated.
fn smooth_trajectory(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
    const ANCHOR_EVERY: usize = 4;
    let n_anchors = t.div_ceil(ANCHOR_EVERY) + 1;
    let anchors: Vec<Vec<f64>> = (0..n_anchors)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    Array2::from_shape_fn((t, d), |(i, j)| {
        let pos = i as f64 / ANCHOR_EVERY as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let hi = (lo + 1).min(n_anchors - 1);
        anchors[lo][j] * (1.0 - frac) + anchors[hi][j] * frac
    })
}

/// Piecewise-linear time resampling to `round(factor * T)` frames (at least 2).
fn time_warp(pattern: &Array2<f64>, factor: f64) -> Array2<f64> {
    let (t_in, d) = pattern.dim();
    let t_out = ((factor * t_in as f64).round() as usize).max(2);
    Array2::from_shape_fn((t_out, d), |(i, j)| {
        if t_out == 1 {
            return pattern[(0, j)];
        }
        let pos = i as f64 * (t_in - 1) as f64 / (t_out - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let hi = (lo + 1).min(t_in - 1);
        pattern[(lo, j)] * (1.0 - frac) + pattern[(hi, j)] * frac
    })
}

fn add_noise(rng: &mut ChaCha8Rng, m: &mut Array2<f64>, stddev: f64) {
    if stddev > 0.0 {
        for v in m.iter_mut() {
            *v += stddev * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn to_storage(m: &Array2<f64>, id: &str) -> FeatureSequence<StorageScalar> {
    FeatureSequence::new(m.mapv(|v| v as f32), 10.0, id).expect("generated frames are finite")
}

struct Generator {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    prototypes: Vec<Array2<f64>>,
    /// Styled prototype variants, `n_styles` per keyword.
    variants: Vec<Vec<Array2<f64>>>,
    offset: Vec<f64>,
}

impl Generator {
    fn keyword_id(j: usize) -> String {
        format!("kw{j:02}")
    }

    fn warped_noisy(&mut self, j: usize) -> Array2<f64> {
        let style = self.rng.random_range(0..self.cfg.n_styles);
        let factor = self.rng.random_range(self.cfg.warp_range.0..=self.cfg.warp_range.1);
        let mut m = time_warp(&self.variants[j][style], factor);
        add_noise(&mut self.rng, &mut m, self.cfg.noise_stddev);
        m
    }

    fn make_exemplars(&mut self) -> Result<Vec<ExemplarSet<StorageScalar>>, SynthError> {
        (0..self.cfg.n_keywords)
            .map(|j| {
                let exemplars = (0..self.cfg.exemplars_per_keyword)
                    .map(|i| {
                        let mut m = self.warped_noisy(j);
                        for mut row in m.rows_mut() {
                            for (v, off) in row.iter_mut().zip(&self.offset) {
                                *v += off;
                            }
                        }
                        to_storage(&m, &format!("{}#e{i:02}", Self::keyword_id(j)))
                    })
                    .collect();
                ExemplarSet::new(Self::keyword_id(j), exemplars)
                    .map_err(|e| SynthError::Generation(e.to_string()))
            })
            .collect()
    }

    fn make_split(&mut self, name: &str, count: usize) -> Result<SynthSplit, SynthError> {
        let mut entries = Vec::with_capacity(count);
        let mut truth = GroundTruth::new();
        let mut plants = Vec::new();
        for u in 0..count {
            let id = format!("{name}_u{u:04}");
            let t_u = self
                .rng
                .random_range(self.cfg.utterance_len.0..=self.cfg.utterance_len.1);
            let mut frames = smooth_trajectory(&mut self.rng, t_u, self.cfg.dim);
            let mut occupied: Vec<(usize, usize)> = Vec::new();
            let mut present = Vec::new();
            for j in 0..self.cfg.n_keywords {
                if self.rng.random::<f64>() >= self.cfg.keyword_prior {
                    continue;
                }
                let plant = self.warped_noisy(j);
                let len = plant.nrows();
                if len > t_u {
                    continue;
                }
                // A few placement attempts; skip the keyword if the utterance
                // is already too crowded.
                let mut placed = None;
                for _ in 0..8 {
                    let max_start = (t_u - len) / self.cfg.align_plants_to;
                    let start = self.rng.random_range(0..=max_start) * self.cfg.align_plants_to;
                    let overlaps = occupied
                        .iter()
                        .any(|&(s, e)| start < e && s < start + len);
                    if !overlaps {
                        placed = Some(start);
                        break;
                    }
                }
                let Some(start) = placed else { continue };
                occupied.push((start, start + len));
                for i in 0..len {
                    for c in 0..self.cfg.dim {
                        frames[(start + i, c)] = plant[(i, c)];
                    }
                }
                present.push(Self::keyword_id(j));
                plants.push(PlantRecord {
                    utterance_id: id.clone(),
                    keyword_id: Self::keyword_id(j),
                    start,
                    len,
                });
            }
            truth.insert(&id, present);
            entries.push(to_storage(&frames, &id));
        }
        let archive =
            FeatureArchive::new(entries).map_err(|e| SynthError::Generation(e.to_string()))?;
        Ok(SynthSplit {
            name: name.to_string(),
            archive,
            truth,
            plants,
        })
    }
}

/// Generate exemplar sets, the three corpus splits and their ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Array2<f64>> = (0..cfg.n_keywords)
        .map(|_| {
            let t = rng.random_range(cfg.keyword_len.0..=cfg.keyword_len.1);
            smooth_trajectory(&mut rng, t, cfg.dim)
        })
        .collect();
    let variants: Vec<Vec<Array2<f64>>> = prototypes
        .iter()
        .map(|proto| {
            (0..cfg.n_styles)
                .map(|_| {
                    let mut v = proto.clone();
                    if cfg.style_stddev > 0.0 {
                        let style = smooth_trajectory(&mut rng, v.nrows(), cfg.dim);
                        v.zip_mut_with(&style, |x, s| *x += cfg.style_stddev * s);
                    }
                    v
                })
                .collect()
        })
        .collect();
    let offset: Vec<f64> = (0..cfg.dim)
        .map(|_| cfg.channel_offset * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut generator = Generator {
        cfg: cfg.clone(),
        rng,
        prototypes,
        variants,
        offset,
    };
    let keywords = generator.make_exemplars()?;
    let train = generator.make_split("train", cfg.train_utterances)?;
    let dev = generator.make_split("dev", cfg.dev_utterances)?;
    let test = generator.make_split("test", cfg.test_utterances)?;
    Ok(SynthOutput {
        keywords,
        train,
        dev,
        test,
    })
}

/// Stamp every generated artifact with the same provenance.
pub fn stamp_output(out: &mut SynthOutput, stamp: Stamp) {
    for split in [&mut out.train, &mut out.dev, &mut out.test] {
        split.archive.set_stamp(stamp);
        split.truth.stamp = stamp;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtw::{keyword_cost, SweepConfig};

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_keywords: 2,
            exemplars_per_keyword: 3,
            train_utterances: 6,
            dev_utterances: 3,
            test_utterances: 4,
            dim: 6,
            utterance_len: (40, 60),
            keyword_len: (8, 12),
            keyword_prior: 0.5,
            warp_range: (0.9, 1.1),
            noise_stddev: 0.2,
            style_stddev: 0.2,
            n_styles: 2,
            channel_offset: 0.3,
            align_plants_to: 1,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_corpora() {
        let cfg = tiny_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (x, y) in a.train.archive.entries().iter().zip(b.train.archive.entries()) {
            assert_eq!(x.frames(), y.frames());
            assert_eq!(x.source_id(), y.source_id());
        }
        assert_eq!(a.train.truth, b.train.truth);
        assert_eq!(a.test.plants, b.test.plants);
        for (ka, kb) in a.keywords.iter().zip(&b.keywords) {
            for (ea, eb) in ka.exemplars().iter().zip(kb.exemplars()) {
                assert_eq!(ea.frames(), eb.frames());
            }
        }
    }

    #[test]
    fn different_seed_changes_the_corpus() {
        let cfg = tiny_cfg();
        let a = generate(&cfg).unwrap();
        let mut cfg2 = tiny_cfg();
        cfg2.seed = 12;
        let b = generate(&cfg2).unwrap();
        let same = a
            .train
            .archive
            .entries()
            .iter()
            .zip(b.train.archive.entries())
            .all(|(x, y)| x.frames() == y.frames());
        assert!(!same);
    }

    #[test]
    fn clean_grid_aligned_plant_costs_zero() {
        let cfg = SynthConfig {
            noise_stddev: 0.0,
            style_stddev: 0.0,
            warp_range: (1.0, 1.0),
            channel_offset: 0.0,
            align_plants_to: 3,
            keyword_prior: 0.9,
            ..tiny_cfg()
        };
        let out = generate(&cfg).unwrap();
        let sweep = SweepConfig::default();
        let mut checked = 0;
        for plant in &out.train.plants {
            let utt = out
                .train
                .archive
                .get(&plant.utterance_id)
                .unwrap()
                .cast::<f64>();
            let set = out
                .keywords
                .iter()
                .find(|k| k.keyword_id() == plant.keyword_id)
                .unwrap()
                .cast::<f64>();
            let c = keyword_cost(&set, &utt, &sweep).unwrap();
            assert!(
                c < 1e-9,
                "clean aligned plant should cost ~0, got {c} for {plant:?}"
            );
            checked += 1;
        }
        assert!(checked > 0, "no plants generated");
    }

    #[test]
    fn truth_lists_exactly_the_planted_keywords() {
        let out = generate(&tiny_cfg()).unwrap();
        for split in [&out.train, &out.dev, &out.test] {
            for plant in &split.plants {
                assert!(split.truth.contains(&plant.utterance_id, &plant.keyword_id));
            }
            let planted: usize = split.plants.len();
            let truth_total: usize = split.truth.utterances().map(|(_, k)| k.len()).sum();
            assert_eq!(planted, truth_total);
        }
    }

    #[test]
    fn utterance_too_short_for_keywords_rejected() {
        let cfg = SynthConfig {
            utterance_len: (10, 20),
            keyword_len: (16, 28),
            warp_range: (1.0, 1.25),
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::InvalidConfig(_))
        ));
    }

    #[test]
    fn warp_changes_length_as_rounded_factor() {
        let m = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64);
        assert_eq!(time_warp(&m, 1.0).nrows(), 10);
        assert_eq!(time_warp(&m, 0.8).nrows(), 8);
        assert_eq!(time_warp(&m, 1.25).nrows(), 13);
        // Endpoints preserved by the resampling.
        let w = time_warp(&m, 1.3);
        assert_eq!(w[(0, 0)], m[(0, 0)]);
        assert_eq!(w[(w.nrows() - 1, 1)], m[(9, 1)]);
    }
}
