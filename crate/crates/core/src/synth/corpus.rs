use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Audio, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    /// Relative to the corpus root, with `/` separators.
    pub path: String,
    pub class: String,
    /// Seconds, after resampling.
    pub duration: f64,
    pub sample_rate: u32,
    pub source_rate: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.iter().map(|e| e.class.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Line-delimited JSON, one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Reads and resamples every asset.
    pub fn load_assets(&self) -> Result<AssetStore> {
        let mut store = AssetStore::default();
        for e in &self.entries {
            let audio = Audio::read_wav(&self.root.join(&e.path))?.resample(SAMPLE_RATE);
            store.insert(&e.id, audio);
        }
        Ok(store)
    }
}

/// In-memory audio assets at the working sample rate, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssetStore {
    assets: BTreeMap<String, Audio>,
}

impl AssetStore {
    pub fn insert(&mut self, id: &str, audio: Audio) {
        self.assets.insert(id.to_string(), audio);
    }

    pub fn get(&self, id: &str) -> Option<&Audio> {
        self.assets.get(id)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Audio)> {
        self.assets.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub min_secs: f64,
    pub max_secs: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Top-level directory name to class label. Unmapped directories use
    /// their own name.
    pub class_map: BTreeMap<String, String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_secs: 0.3,
            max_secs: 30.0,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            class_map: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: CorpusManifest,
    pub assets: AssetStore,
    pub skipped_unreadable: usize,
    pub filtered_duration: usize,
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for item in read {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Scans `root` for WAV files grouped by top-level directory, resamples them
/// to 24 kHz mono, drops clips outside the duration bounds and assigns each
/// asset to a split.
pub fn ingest_corpus(root: &Path, cfg: &IngestConfig) -> Result<IngestReport> {
    if !(cfg.valid_fraction >= 0.0 && cfg.test_fraction >= 0.0 && cfg.valid_fraction + cfg.test_fraction < 1.0) {
        return Err(Error::Configuration("split fractions must be nonnegative and sum below 1".into()));
    }
    let mut files = Vec::new();
    collect_wavs(root, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .filter_map(|p| {
            let r = p.strip_prefix(root).ok()?;
            let parts: Vec<String> = r.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            Some((parts.join("/"), p))
        })
        .collect();
    rel.sort();

    let mut by_class: BTreeMap<String, Vec<CorpusEntry>> = BTreeMap::new();
    let mut assets = AssetStore::default();
    let (mut skipped, mut filtered) = (0, 0);
    for (rel_path, path) in rel {
        let Some((dir, _)) = rel_path.split_once('/') else {
            log::warn!("{rel_path}: not inside a class directory, skipped");
            skipped += 1;
            continue;
        };
        let class = cfg.class_map.get(dir).cloned().unwrap_or_else(|| dir.to_string());
        by_class.entry(class.clone()).or_default();
        let audio = match Audio::read_wav(&path) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping unreadable file: {e}");
                skipped += 1;
                continue;
            }
        };
        let source_rate = audio.sample_rate;
        let audio = audio.resample(SAMPLE_RATE);
        let duration = audio.duration_secs();
        if !(cfg.min_secs..=cfg.max_secs).contains(&duration) {
            filtered += 1;
            continue;
        }
        let id = rel_path.rsplit_once('.').map_or(rel_path.as_str(), |(stem, _)| stem).to_string();
        assets.insert(&id, audio);
        by_class.get_mut(&class).expect("inserted above").push(CorpusEntry {
            id,
            path: rel_path.clone(),
            class,
            duration,
            sample_rate: SAMPLE_RATE,
            source_rate,
            split: Split::Train,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} files skipped");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for (class, mut items) in by_class {
        if items.is_empty() {
            return Err(Error::Input(format!("class {class:?} has no usable audio")));
        }
        assign_splits(&mut items, cfg.valid_fraction, cfg.test_fraction, &mut rng);
        entries.extend(items);
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(IngestReport {
        manifest: CorpusManifest {
            root: root.to_path_buf(),
            entries,
        },
        assets,
        skipped_unreadable: skipped,
        filtered_duration: filtered,
    })
}

/// Shuffles one class's assets and labels the first fractions valid and
/// test. Classes too small to spare an asset stay entirely in train.
pub(crate) fn assign_splits<R: rand::Rng>(items: &mut [CorpusEntry], valid: f64, test: f64, rng: &mut R) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n = items.len();
    let n_valid = (n as f64 * valid).round() as usize;
    let n_test = (n as f64 * test).round() as usize;
    let (n_valid, n_test) = if n_valid + n_test >= n { (0, 0) } else { (n_valid, n_test) };
    for (rank, &i) in order.iter().enumerate() {
        items[i].split = if rank < n_valid {
            Split::Valid
        } else if rank < n_valid + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
}
