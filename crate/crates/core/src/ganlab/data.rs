use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctensor::CTensor;
use crate::error::{ApolloError, Result};
use crate::tfrep::{encode, mel_project, stft, MelBank, StftConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub clip_len: usize,
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub mel_lo: f64,
    pub mel_hi: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            clips_per_class: 512,
            clip_len: 1024,
            sample_rate: 4000,
            win_len: 64,
            hop: 32,
            mel_bins: 16,
            mel_lo: 40.0,
            mel_hi: 1950.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig::new(self.sample_rate, self.win_len, self.hop)
    }

    /// `(bins, frames)` of the generator-side grid after truncation.
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.win_len / 2, self.clip_len / self.hop)
    }

    pub fn mel_bank(&self) -> Result<MelBank> {
        MelBank::new(self.mel_bins, self.win_len / 2 + 1, &self.stft(), self.mel_lo, self.mel_hi)
    }
}

/// Synthetic tonal clips from a handful of classes, each with its own
/// spectral signature.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub cfg: DataConfig,
    pub clips: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Encoded grids (truncated, normalized, square-root compressed).
    pub grids: Vec<CTensor>,
    /// Mean per-clip normalization scale, used to decode generated grids.
    pub mean_scale: (f64, f64),
}

fn class_clip<R: Rng>(class: usize, cfg: &DataConfig, rng: &mut R) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let n = cfg.clip_len;
    let jitter = 1.0 + rng.random_range(-0.03..0.03);
    let amp = rng.random_range(0.6..0.8);
    let ph1 = rng.random_range(0.0..2.0 * PI);
    let ph2 = rng.random_range(0.0..2.0 * PI);
    let nyq = sr / 2.0;
    // base frequencies are spread over the band as fractions of Nyquist
    let f0 = nyq * (0.1 + 0.8 * (class as f64 + 0.5) / cfg.n_classes as f64) * jitter;
    let noise = Normal::new(0.0, cfg.noise.max(0.0) + f64::MIN_POSITIVE).expect("finite noise level");
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let frac = i as f64 / n as f64;
            let s = match class % 4 {
                0 => (2.0 * PI * f0 * t + ph1).sin() + 0.5 * (2.0 * PI * 2.0 * f0 * t + ph2).sin(),
                1 => {
                    // linear chirp from 0.7·f0 to 1.3·f0
                    let f_lo = 0.7 * f0;
                    let rate = 0.6 * f0 * sr / n as f64;
                    (2.0 * PI * (f_lo * t + 0.5 * rate * t * t) + ph1).sin()
                }
                2 => (1.0 + 0.8 * (2.0 * PI * 4.0 * frac + ph2).sin()) * (2.0 * PI * f0 * t + ph1).sin() / 1.8,
                _ => 0.7 * (2.0 * PI * f0 * t + ph1).sin() + 0.7 * (2.0 * PI * 0.55 * f0 * t + ph2).sin(),
            };
            amp * s / 1.5 + noise.sample(rng)
        })
        .collect()
}

/// Flattened mel magnitudes of a clip.
pub fn mel_features(clip: &[f64], cfg: &DataConfig, bank: &MelBank) -> Result<Vec<f64>> {
    let spec = stft(clip, &cfg.stft())?;
    Ok(mel_project(&spec, bank)?.into_iter().flatten().collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl SynthDataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        if cfg.n_classes == 0 || cfg.clips_per_class == 0 {
            return Err(ApolloError::Config("dataset needs at least one class and one clip".into()));
        }
        let stft_cfg = cfg.stft();
        stft_cfg.check()?;
        if cfg.clip_len % cfg.hop != 0 {
            return Err(ApolloError::Config(format!("clip length {} is not a multiple of hop {}", cfg.clip_len, cfg.hop)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut clips = Vec::new();
        let mut labels = Vec::new();
        for c in 0..cfg.n_classes {
            for _ in 0..cfg.clips_per_class {
                clips.push(class_clip(c, cfg, &mut rng));
                labels.push(c);
            }
        }
        let mut grids = Vec::with_capacity(clips.len());
        let (mut sr, mut si) = (0.0, 0.0);
        for clip in &clips {
            let e = encode(clip, &stft_cfg)?;
            sr += e.scale.0;
            si += e.scale.1;
            grids.push(e.grid);
        }
        let n = clips.len() as f64;
        let ds = Self { cfg: cfg.clone(), clips, labels, grids, mean_scale: (sr / n, si / n) };
        ds.check_separable()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn features(&self) -> Result<Vec<Vec<f64>>> {
        let bank = self.cfg.mel_bank()?;
        self.clips.iter().map(|c| mel_features(c, &self.cfg, &bank)).collect()
    }

    /// Between-class centroid distances must exceed the within-class spread
    /// (mean distance to the own centroid) of every class.
    fn check_separable(&self) -> Result<()> {
        if self.cfg.n_classes < 2 {
            return Ok(());
        }
        let feats = self.features()?;
        let dim = feats[0].len();
        let mut centroids = vec![vec![0.0; dim]; self.cfg.n_classes];
        let mut counts = vec![0usize; self.cfg.n_classes];
        for (f, &l) in feats.iter().zip(&self.labels) {
            counts[l] += 1;
            for (c, v) in centroids[l].iter_mut().zip(f) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut spread = vec![0.0; self.cfg.n_classes];
        for (f, &l) in feats.iter().zip(&self.labels) {
            spread[l] += dist(f, &centroids[l]) / counts[l] as f64;
        }
        let max_spread = spread.iter().copied().fold(0.0, f64::max);
        for a in 0..self.cfg.n_classes {
            for b in a + 1..self.cfg.n_classes {
                let d = dist(&centroids[a], &centroids[b]);
                if d <= max_spread {
                    return Err(ApolloError::Config(format!(
                        "classes {a} and {b} are not separable in mel space: centroid distance {d:.3} ≤ spread {max_spread:.3}"
                    )));
                }
            }
        }
        Ok(())
    }
}
