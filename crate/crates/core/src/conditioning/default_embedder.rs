use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{FeatureConfig, FeatureExtractor};
use super::{canonical_label, EmbedderPlugin, EMBEDDING_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub features: FeatureConfig,
    pub projection_seed: u64,
    /// Lower bound on per-feature standard deviations during standardization.
    pub std_floor: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            projection_seed: 0x5eed_0512,
            std_floor: 1e-3,
        }
    }
}

/// Everything needed to rebuild a fitted [`DefaultEmbedder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderAsset {
    pub format_version: u32,
    pub config: EmbedderConfig,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Unit-norm class centroids keyed by canonical label.
    pub centroids: BTreeMap<String, Vec<f64>>,
}

/// Training-free desk-scale embedder: standardized log-mel statistics mapped
/// into 512 dims by a fixed random map with orthonormal columns. The text
/// pathway returns the stored centroid of a class's audio embeddings.
#[derive(Debug)]
pub struct DefaultEmbedder {
    cfg: EmbedderConfig,
    extractor: FeatureExtractor,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `EMBEDDING_DIM × feature_dim`, row-major.
    projection: Vec<f64>,
    centroids: BTreeMap<String, Vec<f64>>,
}

fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..cols {
        for i in 0..j {
            let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = columns.split_at_mut(j);
            for (b, a) in tail[0].iter_mut().zip(&head[i]) {
                *b -= dot * a;
            }
        }
        let norm = columns[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        columns[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * cols + j] = *v;
        }
    }
    out
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl DefaultEmbedder {
    /// Unfitted embedder (zero mean, unit scale, no centroids).
    pub fn new(cfg: EmbedderConfig) -> Self {
        let extractor = FeatureExtractor::new(cfg.features.clone());
        let dim = extractor.dim();
        let projection = orthonormal_columns(EMBEDDING_DIM, dim, cfg.projection_seed);
        Self {
            cfg,
            extractor,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            projection,
            centroids: BTreeMap::new(),
        }
    }

    /// Fits standardization statistics on labelled clips and stores one
    /// centroid per class.
    pub fn fit<'a>(cfg: EmbedderConfig, clips: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<Self> {
        let mut emb = Self::new(cfg);
        let rows: Vec<(String, Vec<f64>)> = clips
            .into_iter()
            .map(|(label, samples)| (canonical_label(label), emb.extractor.extract(samples)))
            .collect();
        if rows.len() < 2 {
            return Err(Error::Input("embedder fit needs at least two clips".into()));
        }
        let dim = emb.extractor.dim();
        let n = rows.len() as f64;
        for d in 0..dim {
            let mean = rows.iter().map(|(_, f)| f[d]).sum::<f64>() / n;
            let var = rows.iter().map(|(_, f)| (f[d] - mean).powi(2)).sum::<f64>() / n;
            emb.mean[d] = mean;
            emb.std[d] = var.sqrt().max(emb.cfg.std_floor);
        }
        let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (label, feats) in &rows {
            let e = normalize(emb.project(&emb.standardize(feats)));
            let acc = sums.entry(label.clone()).or_insert_with(|| vec![0.0; EMBEDDING_DIM]);
            acc.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        }
        emb.centroids = sums.into_iter().map(|(k, v)| (k, normalize(v))).collect();
        Ok(emb)
    }

    fn standardize(&self, feats: &[f64]) -> Vec<f64> {
        feats
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(f, (m, s))| (f - m) / s)
            .collect()
    }

    fn project(&self, z: &[f64]) -> Vec<f64> {
        let dim = z.len();
        (0..EMBEDDING_DIM)
            .map(|i| self.projection[i * dim..(i + 1) * dim].iter().zip(z).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// Standardized feature vector (classifier input).
    pub fn standardized_features(&self, samples: &[f32]) -> Vec<f64> {
        self.standardize(&self.extractor.extract(samples))
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.dim()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.centroids.keys().map(String::as_str)
    }

    pub fn centroid(&self, label: &str) -> Option<&[f64]> {
        self.centroids.get(&canonical_label(label)).map(Vec::as_slice)
    }

    pub fn asset(&self) -> EmbedderAsset {
        EmbedderAsset {
            format_version: 1,
            config: self.cfg.clone(),
            feature_mean: self.mean.clone(),
            feature_std: self.std.clone(),
            centroids: self.centroids.clone(),
        }
    }

    pub fn from_asset(asset: EmbedderAsset) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "embedder asset",
            detail,
        };
        if asset.format_version != 1 {
            return Err(bad(format!("unsupported version {}", asset.format_version)));
        }
        let mut emb = Self::new(asset.config);
        let dim = emb.extractor.dim();
        if asset.feature_mean.len() != dim || asset.feature_std.len() != dim {
            return Err(bad(format!("expected {dim} feature statistics")));
        }
        if let Some((k, _)) = asset.centroids.iter().find(|(_, v)| v.len() != EMBEDDING_DIM) {
            return Err(bad(format!("centroid `{k}` has wrong dimension")));
        }
        emb.mean = asset.feature_mean;
        emb.std = asset.feature_std;
        emb.centroids = asset.centroids;
        Ok(emb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.asset())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_asset(serde_json::from_str(&text)?)
    }
}

impl EmbedderPlugin for DefaultEmbedder {
    fn name(&self) -> &str {
        "logmel-default"
    }

    fn sample_rate(&self) -> u32 {
        self.cfg.features.sample_rate
    }

    fn supports_audio(&self) -> bool {
        true
    }

    fn supports_text(&self) -> bool {
        true
    }

    fn embed_audio(&self, samples: &[f32]) -> Result<Vec<f64>> {
        Ok(self.project(&self.standardized_features(samples)))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = canonical_label(text);
        self.centroids.get(&key).cloned().ok_or(Error::Lookup { kind: "class", key })
    }
}
