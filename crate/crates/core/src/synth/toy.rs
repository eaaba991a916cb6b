//! Synthetic corpus of eight band-limited sound classes plus background
//! noise, for desk-scale experiments.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{assign_splits, AssetStore, CorpusEntry, CorpusManifest, Split};
use super::BACKGROUND_CLASS;
use crate::audio::{Audio, WavFormat, SAMPLE_RATE};
use crate::error::Result;

pub const TOY_CLASSES: [&str; 8] = [
    "hum",
    "bell",
    "chirp_up",
    "hiss",
    "knock",
    "tremolo",
    "chirp_down",
    "fm_tone",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub classes: Vec<String>,
    pub assets_per_class: usize,
    pub background_assets: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    pub background_secs: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
            assets_per_class: 24,
            background_assets: 12,
            min_secs: 0.6,
            max_secs: 1.8,
            background_secs: 3.0,
            valid_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

fn fade(samples: &mut [f64]) {
    let n = ((0.01 * SAMPLE_RATE as f64) as usize).min(samples.len() / 2);
    let len = samples.len();
    for k in 0..n {
        let w = 0.5 - 0.5 * (PI * k as f64 / n as f64).cos();
        samples[k] *= w;
        samples[len - 1 - k] *= w;
    }
}

fn sines<R: Rng>(n: usize, freqs: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    let phases: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    (0..n)
        .map(|k| {
            let t = k as f64 / SAMPLE_RATE as f64;
            freqs
                .iter()
                .zip(&phases)
                .map(|(&(f, a), &p)| a * (2.0 * PI * f * t + p).sin())
                .sum()
        })
        .collect()
}

/// Renders one asset of `class`. Unknown class names fall back to a plain
/// tone whose pitch is derived from the name.
pub fn render_class<R: Rng>(class: &str, secs: f64, rng: &mut R) -> Vec<f64> {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let sr = SAMPLE_RATE as f64;
    let mut out = match class {
        "hum" => {
            let f0 = rng.random_range(90.0..160.0);
            let partials: Vec<(f64, f64)> = (1..=8).map(|k| (f0 * k as f64, 1.0 / k as f64)).collect();
            sines(n, &partials, rng)
        }
        "bell" => {
            let f = rng.random_range(350.0..550.0);
            let partials = [(1.0, 1.0, 0.6), (2.76, 0.6, 0.35), (5.40, 0.3, 0.2)];
            let strikes = [0.0, rng.random_range(0.3..0.6)];
            (0..n)
                .map(|k| {
                    let t = k as f64 / sr;
                    strikes
                        .iter()
                        .filter(|&&s| t >= s)
                        .map(|&s| {
                            partials
                                .iter()
                                .map(|&(m, a, tau)| a * (-(t - s) / tau).exp() * (2.0 * PI * m * f * (t - s)).sin())
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        }
        "chirp_up" | "chirp_down" => {
            let lo = rng.random_range(250.0..500.0);
            let hi = rng.random_range(1800.0..2800.0);
            let (f_start, f_end) = if class == "chirp_up" { (lo, hi) } else { (hi, lo) };
            let rate = (f_end - f_start) / secs;
            (0..n)
                .map(|k| {
                    let t = k as f64 / sr;
                    (2.0 * PI * (f_start * t + 0.5 * rate * t * t)).sin()
                })
                .collect()
        }
        "hiss" => {
            let center = rng.random_range(1500.0..2200.0);
            let band: Vec<(f64, f64)> = (0..80).map(|_| (center + rng.random_range(-400.0..400.0), 1.0)).collect();
            sines(n, &band, rng)
        }
        "knock" => {
            let period = rng.random_range(0.15..0.3);
            let f = rng.random_range(180.0..400.0);
            (0..n)
                .map(|k| {
                    let t = k as f64 / sr;
                    let local = t % period;
                    (-local / 0.03).exp() * ((2.0 * PI * f * local).sin() + 0.4 * (2.0 * PI * 2.3 * f * local).sin())
                })
                .collect()
        }
        "tremolo" => {
            let f = rng.random_range(500.0..900.0);
            let rate = rng.random_range(5.0..10.0);
            let tone = sines(n, &[(f, 1.0), (2.0 * f, 0.3)], rng);
            tone.iter()
                .enumerate()
                .map(|(k, v)| v * (1.0 - 0.9 * (0.5 + 0.5 * (2.0 * PI * rate * k as f64 / sr).sin())))
                .collect()
        }
        "fm_tone" => {
            let carrier = rng.random_range(1000.0..1500.0);
            let rate = rng.random_range(4.0..7.0);
            let depth = rng.random_range(80.0..200.0);
            (0..n)
                .map(|k| {
                    let t = k as f64 / sr;
                    (2.0 * PI * carrier * t - depth / rate * (2.0 * PI * rate * t).cos()).sin()
                })
                .collect()
        }
        BACKGROUND_CLASS => {
            let tilt = rng.random_range(0.3..0.7);
            let freqs: Vec<(f64, f64)> = (0..120)
                .map(|_| {
                    let f = 60.0 * (3000.0f64 / 60.0).powf(rng.random_range(0.0..1.0));
                    (f, f.powf(-tilt))
                })
                .collect();
            sines(n, &freqs, rng)
        }
        other => {
            let h = other.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
            sines(n, &[(200.0 + (h % 2000) as f64, 1.0)], rng)
        }
    };
    fade(&mut out);
    out
}

/// Generates the corpus in memory. Asset ids are `class/NNN`.
pub fn toy_corpus(cfg: &ToyCorpusConfig) -> (CorpusManifest, AssetStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = AssetStore::default();
    let mut entries = Vec::new();
    let groups = cfg
        .classes
        .iter()
        .map(|c| (c.as_str(), cfg.assets_per_class))
        .chain(std::iter::once((BACKGROUND_CLASS, cfg.background_assets)));
    for (class, count) in groups {
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let secs = if class == BACKGROUND_CLASS {
                cfg.background_secs
            } else {
                rng.random_range(cfg.min_secs..=cfg.max_secs)
            };
            let mut samples = render_class(class, secs, &mut rng);
            let level = rng.random_range(0.05..0.15);
            let r = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
            samples.iter_mut().for_each(|v| *v *= level / r);
            let audio = Audio::new(samples.iter().map(|&v| v as f32).collect(), SAMPLE_RATE);
            let id = format!("{class}/{i:03}");
            items.push(CorpusEntry {
                path: format!("{id}.wav"),
                class: class.to_string(),
                duration: audio.duration_secs(),
                sample_rate: SAMPLE_RATE,
                source_rate: SAMPLE_RATE,
                split: Split::Train,
                id: id.clone(),
            });
            store.insert(&id, audio);
        }
        assign_splits(&mut items, cfg.valid_fraction, cfg.test_fraction, &mut rng);
        entries.extend(items);
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    (
        CorpusManifest {
            root: Default::default(),
            entries,
        },
        store,
    )
}

/// Writes the toy corpus as `dir/<class>/NNN.wav` (float WAV) and returns
/// the manifest rooted at `dir`.
pub fn write_toy_corpus(cfg: &ToyCorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    let (mut manifest, store) = toy_corpus(cfg);
    for e in &manifest.entries {
        store.get(&e.id).expect("generated").write_wav(&dir.join(&e.path), WavFormat::Float32)?;
    }
    manifest.root = dir.to_path_buf();
    Ok(manifest)
}
