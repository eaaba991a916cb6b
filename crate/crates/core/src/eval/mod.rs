//! Objective metrics and the batch evaluation harness.

mod classifier;
mod metrics;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use classifier::{ClassifierAsset, ClassifierConfig, ClassifierPlugin, ToyClassifier};
pub use metrics::{embedding_cosine, frechet_distance, frechet_distance_with, paired_kl, FD_EPSILON, KL_EPSILON};

use crate::audio::{Audio, SAMPLE_RATE};
use crate::codec::CodecPlugin;
use crate::conditioning::{embed_audio_reference, embed_text_reference, EmbedderPlugin, ReferenceEmbedding};
use crate::diffusion::{sample, NoiseSchedule, Predictor, SamplerConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::{synthesize_mixture, AssetStore, DatasetItem, PlannedItem};

/// One evaluation case. `target` is `None` when the ground truth could not
/// be loaded; such items are skipped and counted.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub class: String,
    pub mixture: Audio,
    pub target: Option<Audio>,
    pub reference: Audio,
}

/// Loads items from a built dataset. Unreadable mixtures or references are
/// errors; an unreadable target only marks the item as skipped.
pub fn load_eval_items<'a>(
    items: impl IntoIterator<Item = &'a DatasetItem>,
    dataset_dir: &Path,
) -> Result<Vec<EvalItem>> {
    let read = |rel: &str| Audio::read_wav(&dataset_dir.join(rel)).map(|a| a.resample(SAMPLE_RATE));
    items
        .into_iter()
        .map(|item| {
            let target = match read(&item.target_path) {
                Ok(a) => Some(a),
                Err(e) => {
                    log::warn!("{}: ground truth unavailable ({e}); skipping", item.id);
                    None
                }
            };
            Ok(EvalItem {
                id: item.id.clone(),
                class: item.class.clone(),
                mixture: read(&item.mixture_path)?,
                target,
                reference: read(&item.reference_path)?,
            })
        })
        .collect()
}

/// Renders planned items in memory.
pub fn planned_eval_items<'a>(
    items: impl IntoIterator<Item = &'a PlannedItem>,
    assets: &AssetStore,
) -> Result<Vec<EvalItem>> {
    items
        .into_iter()
        .map(|p| {
            let (mixture, target) = synthesize_mixture(&p.spec, assets)?;
            let reference = assets.get(&p.reference_asset).ok_or_else(|| Error::Lookup {
                kind: "asset",
                key: p.reference_asset.clone(),
            })?;
            Ok(EvalItem {
                id: p.id.clone(),
                class: p.spec.target.class.clone(),
                mixture,
                target: Some(target),
                reference: reference.clone(),
            })
        })
        .collect()
}

/// Produces an estimate of the target from an evaluation item.
pub trait Extractor {
    fn name(&self) -> &str;
    fn extract(&self, item: &EvalItem) -> Result<Audio>;
}

/// Returns the ground truth: the metric suite's upper bound.
pub struct OracleExtractor;

impl Extractor for OracleExtractor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn extract(&self, item: &EvalItem) -> Result<Audio> {
        item.target
            .clone()
            .ok_or_else(|| Error::Input(format!("{}: no ground truth for oracle pass-through", item.id)))
    }
}

/// Returns the unprocessed mixture.
pub struct MixtureExtractor;

impl Extractor for MixtureExtractor {
    fn name(&self) -> &str {
        "mixture"
    }

    fn extract(&self, item: &EvalItem) -> Result<Audio> {
        Ok(item.mixture.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Audio,
    /// Query with the item's class label.
    Text,
}

/// Encodes, samples and decodes one mixture. Output length matches the input.
pub fn extract_with_model<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    codec: &dyn CodecPlugin<T>,
    schedule: &NoiseSchedule,
    mixture: &Audio,
    reference: &ReferenceEmbedding<T>,
    cfg: &SamplerConfig,
) -> Result<Audio> {
    let x_m = codec.encode(mixture)?;
    let x0 = sample(model, &x_m, reference, schedule, cfg)?;
    let mut out = codec.decode(&x0)?;
    out.samples.truncate(mixture.len());
    Ok(out)
}

/// FNV-1a, used to give each item a stable sampler seed.
fn id_hash(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Runs the diffusion model on each item. The sampler seed for an item is
/// `cfg.seed` mixed with a hash of the item id.
pub struct DiffusionExtractor<'a, T: Scalar, P: Predictor<T> + ?Sized> {
    pub model: &'a P,
    pub codec: &'a dyn CodecPlugin<T>,
    pub embedder: &'a dyn EmbedderPlugin,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    pub query: QueryMode,
}

impl<T: Scalar, P: Predictor<T> + ?Sized> Extractor for DiffusionExtractor<'_, T, P> {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn extract(&self, item: &EvalItem) -> Result<Audio> {
        let reference = match self.query {
            QueryMode::Audio => embed_audio_reference(&item.reference, self.embedder)?,
            QueryMode::Text => embed_text_reference(&item.class, self.embedder)?,
        };
        let cfg = SamplerConfig {
            seed: self.sampler.seed ^ id_hash(&item.id),
            ..self.sampler.clone()
        };
        extract_with_model(self.model, self.codec, self.schedule, &item.mixture, &reference, &cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub id: String,
    pub class: String,
    pub cosine_audio: f64,
    /// Absent when the embedder has no text embedding for the class.
    pub cosine_text: Option<f64>,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub fd: f64,
    pub mean_kl: f64,
    pub mean_cosine_audio: f64,
    pub mean_cosine_text: Option<f64>,
    pub items: usize,
    pub skipped: usize,
    /// Filled in from an external tool; never computed here.
    pub visqol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetadata {
    pub model_id: String,
    pub dataset_id: String,
    pub extractor: String,
    pub guidance_scale: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub aggregates: Aggregates,
    pub items: Vec<ItemRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine {
    Summary {
        metadata: EvalMetadata,
        aggregates: Aggregates,
    },
    Item(ItemRecord),
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub const CSV_HEADER: &str = "system,dataset,items,FD,KL,cosine_audio,cosine_text,visqol";

impl EvalReport {
    /// Per-item means, which the stored aggregates must equal.
    pub fn recomputed_means(&self) -> (f64, f64, Option<f64>) {
        (
            mean(self.items.iter().map(|r| r.kl)).unwrap_or(f64::NAN),
            mean(self.items.iter().map(|r| r.cosine_audio)).unwrap_or(f64::NAN),
            mean(self.items.iter().filter_map(|r| r.cosine_text)),
        )
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let a = &self.aggregates;
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.metadata.extractor,
            self.metadata.dataset_id,
            a.items,
            a.fd,
            a.mean_kl,
            a.mean_cosine_audio,
            opt(a.mean_cosine_text),
            opt(a.visqol)
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{CSV_HEADER}\n{}\n", self.csv_row())).map_err(|e| Error::io(path, e))
    }

    /// Summary line first, then one line per item.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let summary = ReportLine::Summary {
            metadata: self.metadata.clone(),
            aggregates: self.aggregates.clone(),
        };
        serde_json::to_writer(&mut out, &summary)?;
        out.push(b'\n');
        for item in &self.items {
            serde_json::to_writer(&mut out, &ReportLine::Item(item.clone()))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut items = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                ReportLine::Summary { metadata, aggregates } => header = Some((metadata, aggregates)),
                ReportLine::Item(r) => items.push(r),
            }
        }
        let (metadata, aggregates) = header.ok_or(Error::Format {
            what: "evaluation report",
            detail: "missing summary line".into(),
        })?;
        Ok(Self {
            metadata,
            aggregates,
            items,
        })
    }
}

/// Scores an extractor against ground truth.
///
/// Per item: cosine between embeddings of the estimate and the ground truth,
/// cosine between the estimate and the class text embedding, and
/// `KL(p(ground truth) ‖ p(estimate))` under the classifier. FD compares
/// the classifier features of all estimates with those of all ground truths.
pub fn evaluate(
    items: &[EvalItem],
    extractor: &dyn Extractor,
    embedder: &dyn EmbedderPlugin,
    classifier: &dyn ClassifierPlugin,
    mut metadata: EvalMetadata,
) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut feats_est = Vec::new();
    let mut feats_ref = Vec::new();
    let mut skipped = 0;
    for item in items {
        let Some(target) = &item.target else {
            skipped += 1;
            continue;
        };
        let estimate = extractor.extract(item)?;
        let e_est = embedder.embed_audio(&estimate.samples)?;
        let e_ref = embedder.embed_audio(&target.samples)?;
        let cosine_text = if embedder.supports_text() {
            match embedder.embed_text(&item.class) {
                Ok(e_text) => Some(embedding_cosine(&e_est, &e_text)?),
                Err(Error::Lookup { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let kl = paired_kl(
            &classifier.posterior(&target.samples)?,
            &classifier.posterior(&estimate.samples)?,
            KL_EPSILON,
        )?;
        feats_est.push(classifier.features(&estimate.samples)?);
        feats_ref.push(classifier.features(&target.samples)?);
        records.push(ItemRecord {
            id: item.id.clone(),
            class: item.class.clone(),
            cosine_audio: embedding_cosine(&e_est, &e_ref)?,
            cosine_text,
            kl,
        });
        log::debug!("{}: cosine {:.4}", item.id, records.last().unwrap().cosine_audio);
    }
    if records.len() < 2 {
        return Err(Error::Input(format!(
            "evaluation needs at least 2 items with ground truth, got {}",
            records.len()
        )));
    }
    let fd = frechet_distance(&feats_est, &feats_ref)?;
    metadata.extractor = extractor.name().to_string();
    let mut report = EvalReport {
        metadata,
        aggregates: Aggregates {
            fd,
            mean_kl: 0.0,
            mean_cosine_audio: 0.0,
            mean_cosine_text: None,
            items: records.len(),
            skipped,
            visqol: None,
        },
        items: records,
    };
    let (kl, ca, ct) = report.recomputed_means();
    report.aggregates.mean_kl = kl;
    report.aggregates.mean_cosine_audio = ca;
    report.aggregates.mean_cosine_text = ct;
    Ok(report)
}
