use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{AssetStore, CorpusEntry, CorpusManifest, Split};
use super::{synthesize_mixture, BackgroundSpec, EventSpec, InterfererSpec, MixtureSpec, BACKGROUND_CLASS};
use crate::audio::WavFormat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub mixtures_per_file: usize,
    pub duration_secs: f64,
    pub min_interferers: usize,
    pub max_interferers: usize,
    pub interferer_snr_db: [f64; 2],
    pub background_snr_db: [f64; 2],
    pub splits: Vec<Split>,
    pub wav_format: WavFormat,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mixtures_per_file: 3,
            duration_secs: 10.0,
            min_interferers: 1,
            max_interferers: 3,
            interferer_snr_db: [-10.0, 10.0],
            background_snr_db: [-5.0, 10.0],
            splits: Split::ALL.to_vec(),
            wav_format: WavFormat::Float32,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        if self.mixtures_per_file == 0 {
            return bad("mixtures_per_file must be positive");
        }
        if !(self.duration_secs > 0.0) {
            return bad("duration_secs must be positive");
        }
        if !(1 <= self.min_interferers && self.min_interferers <= self.max_interferers && self.max_interferers <= 3) {
            return bad("interferer counts must satisfy 1 <= min <= max <= 3");
        }
        for [lo, hi] in [self.interferer_snr_db, self.background_snr_db] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return bad("SNR ranges must be finite with low <= high");
            }
        }
        Ok(())
    }
}

/// A mixture recipe before any audio is rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedItem {
    pub id: String,
    pub split: Split,
    pub spec: MixtureSpec,
    pub reference_asset: String,
    /// True when the class had no other asset and the target doubles as
    /// the reference.
    pub reference_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snrs {
    pub interferers: Vec<f64>,
    pub background: Option<f64>,
}

/// One manifest row. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItem {
    pub id: String,
    pub split: Split,
    pub class: String,
    pub mixture_path: String,
    pub target_path: String,
    pub reference_path: String,
    pub reference_asset: String,
    pub reference_fallback: bool,
    pub snrs: Snrs,
    /// Target onset first, then interferers.
    pub onsets: Vec<f64>,
    pub seed: u64,
    pub spec: MixtureSpec,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub items: Vec<DatasetItem>,
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for item in &self.items {
            *out.entry(item.split).or_insert(0) += 1;
        }
        out
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for item in &self.items {
            text.push_str(&serde_json::to_string(item)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let items = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { items })
    }
}

fn pick<'a, R: Rng>(items: &[&'a CorpusEntry], rng: &mut R) -> &'a CorpusEntry {
    items[rng.random_range(0..items.len())]
}

fn onset<R: Rng>(duration: f64, len: f64, rng: &mut R) -> f64 {
    let hi = (duration - len.min(1.0)).max(0.0);
    if hi > 0.0 {
        rng.random_range(0.0..hi)
    } else {
        0.0
    }
}

fn uniform<R: Rng>([lo, hi]: [f64; 2], rng: &mut R) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws every mixture recipe. Each target asset yields
/// `mixtures_per_file` items, each with its own seed derived from
/// `master_seed`.
pub fn generate_specs(cfg: &DatasetConfig, corpus: &CorpusManifest, master_seed: u64) -> Result<Vec<PlannedItem>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let all_backgrounds: Vec<&CorpusEntry> = corpus.entries.iter().filter(|e| e.class == BACKGROUND_CLASS).collect();
    if all_backgrounds.is_empty() {
        log::warn!("corpus has no {BACKGROUND_CLASS:?} assets; mixtures get no background layer");
    }
    let mut out = Vec::new();
    for &split in &cfg.splits {
        let events: Vec<&CorpusEntry> = corpus.in_split(split).filter(|e| e.class != BACKGROUND_CLASS).collect();
        let backgrounds: Vec<&CorpusEntry> = match corpus.in_split(split).filter(|e| e.class == BACKGROUND_CLASS).collect::<Vec<_>>() {
            v if v.is_empty() => all_backgrounds.clone(),
            v => v,
        };
        for target in &events {
            let others: Vec<&CorpusEntry> = events.iter().copied().filter(|e| e.class != target.class).collect();
            if others.is_empty() {
                return Err(Error::Input(format!(
                    "split {split} has no interferer candidates for class {:?}",
                    target.class
                )));
            }
            let same: Vec<&CorpusEntry> =
                events.iter().copied().filter(|e| e.class == target.class && e.id != target.id).collect();
            for _ in 0..cfg.mixtures_per_file {
                let seed = master.next_u64();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let count = rng.random_range(cfg.min_interferers..=cfg.max_interferers);
                let interferers = (0..count)
                    .map(|_| {
                        let e = pick(&others, &mut rng);
                        InterfererSpec {
                            asset: e.id.clone(),
                            class: e.class.clone(),
                            onset: onset(cfg.duration_secs, e.duration, &mut rng),
                            snr_db: uniform(cfg.interferer_snr_db, &mut rng),
                        }
                    })
                    .collect();
                let background = (!backgrounds.is_empty()).then(|| BackgroundSpec {
                    asset: pick(&backgrounds, &mut rng).id.clone(),
                    snr_db: uniform(cfg.background_snr_db, &mut rng),
                });
                let target_onset = onset(cfg.duration_secs, target.duration, &mut rng);
                let (reference_asset, reference_fallback) = if same.is_empty() {
                    (target.id.clone(), true)
                } else {
                    (pick(&same, &mut rng).id.clone(), false)
                };
                out.push(PlannedItem {
                    id: format!("{split}-{:06}", out.len()),
                    split,
                    spec: MixtureSpec {
                        target: EventSpec {
                            asset: target.id.clone(),
                            class: target.class.clone(),
                            onset: target_onset,
                        },
                        interferers,
                        background,
                        duration: cfg.duration_secs,
                        seed,
                    },
                    reference_asset,
                    reference_fallback,
                });
            }
        }
    }
    Ok(out)
}

/// Renders every planned mixture into `out_dir` and writes
/// `out_dir/manifest.jsonl`.
pub fn build_dataset(
    cfg: &DatasetConfig,
    corpus: &CorpusManifest,
    assets: &AssetStore,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let planned = generate_specs(cfg, corpus, master_seed)?;
    let mut items = Vec::with_capacity(planned.len());
    for p in planned {
        let (mix, target) = synthesize_mixture(&p.spec, assets)?;
        let reference = assets.get(&p.reference_asset).ok_or_else(|| Error::Lookup {
            kind: "asset",
            key: p.reference_asset.clone(),
        })?;
        let rel = |kind: &str| format!("{}/{kind}/{}.wav", p.split, p.id);
        let (mixture_path, target_path, reference_path) = (rel("mixture"), rel("target"), rel("reference"));
        mix.write_wav(&out_dir.join(&mixture_path), cfg.wav_format)?;
        target.write_wav(&out_dir.join(&target_path), cfg.wav_format)?;
        reference.write_wav(&out_dir.join(&reference_path), cfg.wav_format)?;
        if p.reference_fallback {
            log::warn!("{}: class {:?} has a single asset; target reused as reference", p.id, p.spec.target.class);
        }
        let spec = p.spec;
        items.push(DatasetItem {
            id: p.id,
            split: p.split,
            class: spec.target.class.clone(),
            mixture_path,
            target_path,
            reference_path,
            reference_asset: p.reference_asset,
            reference_fallback: p.reference_fallback,
            snrs: Snrs {
                interferers: spec.interferers.iter().map(|i| i.snr_db).collect(),
                background: spec.background.as_ref().map(|b| b.snr_db),
            },
            onsets: std::iter::once(spec.target.onset)
                .chain(spec.interferers.iter().map(|i| i.onset))
                .collect(),
            seed: spec.seed,
            spec,
        });
    }
    let manifest = DatasetManifest { items };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
