use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{canonical_label, FeatureConfig, FeatureExtractor};
use crate::error::{Error, Result};

/// Audio classifier used by the metric suite: a feature vector for FD and a
/// class posterior for KL.
pub trait ClassifierPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn labels(&self) -> &[String];
    fn features(&self, samples: &[f32]) -> Result<Vec<f64>>;
    fn posterior(&self, samples: &[f32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub features: FeatureConfig,
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            hidden: 32,
            iterations: 400,
            lr: 1e-2,
            weight_decay: 1e-4,
            seed: 0xc1a55,
        }
    }
}

/// Persisted weights of a [`ToyClassifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierAsset {
    pub format_version: u32,
    pub config: ClassifierConfig,
    pub labels: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `hidden × input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// One-hidden-layer tanh MLP over standardized log-mel statistics.
/// The hidden activations are the FD features.
#[derive(Debug)]
pub struct ToyClassifier {
    extractor: FeatureExtractor,
    asset: ClassifierAsset,
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    z.iter_mut().for_each(|v| *v = (*v - m).exp());
    let s: f64 = z.iter().sum();
    z.iter_mut().for_each(|v| *v /= s);
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, wd: f64, t: i32) {
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (wd * p[i] + (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8));
        }
    }
}

impl ToyClassifier {
    /// Trains on labelled clips with full-batch AdamW on cross-entropy.
    pub fn fit<'a>(cfg: ClassifierConfig, clips: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<Self> {
        let extractor = FeatureExtractor::new(cfg.features.clone());
        let rows: Vec<(String, Vec<f64>)> = clips
            .into_iter()
            .map(|(label, s)| (canonical_label(label), extractor.extract(s)))
            .collect();
        let mut labels: Vec<String> = rows.iter().map(|(l, _)| l.clone()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::Input("classifier needs clips from at least two classes".into()));
        }
        if cfg.hidden == 0 || cfg.iterations == 0 || !(cfg.lr > 0.0) {
            return Err(Error::param("classifier hidden size, iterations and lr must be positive"));
        }
        let (d, h, k) = (extractor.dim(), cfg.hidden, labels.len());
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            mean[j] = rows.iter().map(|(_, f)| f[j]).sum::<f64>() / n;
            std[j] = (rows.iter().map(|(_, f)| (f[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-3);
        }
        let xs: Vec<Vec<f64>> = rows
            .iter()
            .map(|(_, f)| f.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect();
        let ys: Vec<usize> = rows.iter().map(|(l, _)| labels.binary_search(l).unwrap()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = |fan_in: usize, len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            (0..len).map(|_| dist.sample(rng)).collect()
        };
        let mut asset = ClassifierAsset {
            format_version: 1,
            labels,
            feature_mean: mean,
            feature_std: std,
            w1: init(d, h * d, &mut rng),
            b1: vec![0.0; h],
            w2: init(h, k * h, &mut rng),
            b2: vec![0.0; k],
            config: cfg,
        };
        let mut opts = [Adam::new(h * d), Adam::new(h), Adam::new(k * h), Adam::new(k)];
        for it in 1..=asset.config.iterations {
            let mut g = [vec![0.0; h * d], vec![0.0; h], vec![0.0; k * h], vec![0.0; k]];
            for (x, &y) in xs.iter().zip(&ys) {
                let hid = hidden(&asset, x);
                let mut p = logits(&asset, &hid);
                softmax(&mut p);
                p[y] -= 1.0;
                let mut dh = vec![0.0; h];
                for c in 0..k {
                    g[3][c] += p[c] / n;
                    for j in 0..h {
                        g[2][c * h + j] += p[c] * hid[j] / n;
                        dh[j] += p[c] * asset.w2[c * h + j];
                    }
                }
                for j in 0..h {
                    let dz = dh[j] * (1.0 - hid[j] * hid[j]) / n;
                    g[1][j] += dz;
                    for (gw, xi) in g[0][j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gw += dz * xi;
                    }
                }
            }
            let (lr, wd, t) = (asset.config.lr, asset.config.weight_decay, it as i32);
            opts[0].step(&mut asset.w1, &g[0], lr, wd, t);
            opts[1].step(&mut asset.b1, &g[1], lr, 0.0, t);
            opts[2].step(&mut asset.w2, &g[2], lr, wd, t);
            opts[3].step(&mut asset.b2, &g[3], lr, 0.0, t);
        }
        Ok(Self { extractor, asset })
    }

    fn standardized(&self, samples: &[f32]) -> Vec<f64> {
        let a = &self.asset;
        self.extractor
            .extract(samples)
            .iter()
            .zip(a.feature_mean.iter().zip(&a.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Most probable label.
    pub fn predict(&self, samples: &[f32]) -> Result<&str> {
        let p = self.posterior(samples)?;
        let best = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
        Ok(&self.asset.labels[best])
    }

    pub fn asset(&self) -> &ClassifierAsset {
        &self.asset
    }

    pub fn from_asset(asset: ClassifierAsset) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "classifier asset",
            detail,
        };
        if asset.format_version != 1 {
            return Err(bad(format!("unsupported version {}", asset.format_version)));
        }
        let extractor = FeatureExtractor::new(asset.config.features.clone());
        let (d, h, k) = (extractor.dim(), asset.config.hidden, asset.labels.len());
        if asset.feature_mean.len() != d
            || asset.feature_std.len() != d
            || asset.w1.len() != h * d
            || asset.b1.len() != h
            || asset.w2.len() != k * h
            || asset.b2.len() != k
        {
            return Err(bad("weight shapes do not match the configuration".into()));
        }
        Ok(Self { extractor, asset })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.asset)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_asset(serde_json::from_str(&text)?)
    }
}

fn hidden(a: &ClassifierAsset, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..a.b1.len())
        .map(|j| (a.b1[j] + a.w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh())
        .collect()
}

fn logits(a: &ClassifierAsset, hid: &[f64]) -> Vec<f64> {
    let h = hid.len();
    (0..a.b2.len())
        .map(|c| a.b2[c] + a.w2[c * h..(c + 1) * h].iter().zip(hid).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

impl ClassifierPlugin for ToyClassifier {
    fn name(&self) -> &str {
        "toy-mlp"
    }

    fn labels(&self) -> &[String] {
        &self.asset.labels
    }

    fn features(&self, samples: &[f32]) -> Result<Vec<f64>> {
        Ok(hidden(&self.asset, &self.standardized(samples)))
    }

    fn posterior(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let mut z = logits(&self.asset, &hidden(&self.asset, &self.standardized(samples)));
        softmax(&mut z);
        Ok(z)
    }
}
