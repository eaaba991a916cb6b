//! Reference embeddings for audio and text queries.
//!
//! An [`EmbedderPlugin`] maps audio clips and text labels into one shared
//! 512-d space. The desk-scale [`DefaultEmbedder`] uses log-mel statistics
//! and answers text queries with stored class centroids; external encoders
//! plug in through the same trait.

mod default_embedder;
mod features;

use rand::Rng;

pub use default_embedder::{DefaultEmbedder, EmbedderAsset, EmbedderConfig};
pub use features::{FeatureConfig, FeatureExtractor};

use crate::audio::Audio;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const EMBEDDING_DIM: usize = 512;
/// Shortest reference clip accepted, in seconds.
pub const MIN_REFERENCE_SECS: f64 = 0.3;

/// Text augmentation templates; `[CLS]` is replaced by the class label.
pub const TEXT_TEMPLATES: [&str; 3] = ["[CLS]", "An audio clip of [CLS]", "The sound of [CLS]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Audio,
    Text,
    Null,
}

/// 512-d conditioning vector. Audio and text embeddings are unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbedding<T> {
    data: Vec<T>,
    provenance: Provenance,
}

impl<T: Scalar> ReferenceEmbedding<T> {
    /// L2-normalizes `data`; fails on wrong dimension, non-finite entries
    /// or a zero vector.
    pub fn from_unnormalized(data: Vec<T>, provenance: Provenance) -> Result<Self> {
        check_dim(data.len())?;
        let norm = data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric(format!("cannot normalize embedding with norm {norm}")));
        }
        let data = data.into_iter().map(|v| T::of(v.f64() / norm)).collect();
        Ok(Self { data, provenance })
    }

    /// Learned null condition; stored as-is.
    pub fn null(data: Vec<T>) -> Result<Self> {
        check_dim(data.len())?;
        Ok(Self {
            data,
            provenance: Provenance::Null,
        })
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn cast<U: Scalar>(&self) -> ReferenceEmbedding<U> {
        ReferenceEmbedding {
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            provenance: self.provenance,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }
}

fn check_dim(len: usize) -> Result<()> {
    if len != EMBEDDING_DIM {
        return Err(Error::param(format!("embedding must have {EMBEDDING_DIM} dims, got {len}")));
    }
    Ok(())
}

/// A pluggable audio/text encoder sharing one embedding space.
pub trait EmbedderPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn sample_rate(&self) -> u32;
    fn supports_audio(&self) -> bool;
    fn supports_text(&self) -> bool;
    /// Raw (not necessarily normalized) 512-d audio embedding.
    fn embed_audio(&self, samples: &[f32]) -> Result<Vec<f64>>;
    /// Raw 512-d text embedding.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn embed_audio_reference<T: Scalar>(
    query: &Audio,
    plugin: &dyn EmbedderPlugin,
) -> Result<ReferenceEmbedding<T>> {
    if !plugin.supports_audio() {
        return Err(Error::Capability {
            plugin: plugin.name().to_string(),
            capability: "audio queries",
        });
    }
    if query.sample_rate != plugin.sample_rate() {
        return Err(Error::Input(format!(
            "reference audio at {} Hz, embedder expects {} Hz",
            query.sample_rate,
            plugin.sample_rate()
        )));
    }
    if query.duration_secs() < MIN_REFERENCE_SECS {
        return Err(Error::Input(format!(
            "reference audio is {:.3} s, shorter than {MIN_REFERENCE_SECS} s",
            query.duration_secs()
        )));
    }
    let raw = plugin.embed_audio(&query.samples)?;
    ReferenceEmbedding::from_unnormalized(raw.into_iter().map(T::of).collect(), Provenance::Audio)
}

pub fn embed_text_reference<T: Scalar>(label: &str, plugin: &dyn EmbedderPlugin) -> Result<ReferenceEmbedding<T>> {
    if !plugin.supports_text() {
        return Err(Error::Capability {
            plugin: plugin.name().to_string(),
            capability: "text queries",
        });
    }
    if label.trim().is_empty() {
        return Err(Error::Input("text query is empty".into()));
    }
    let raw = plugin.embed_text(label)?;
    ReferenceEmbedding::from_unnormalized(raw.into_iter().map(T::of).collect(), Provenance::Text)
}

/// Fills a uniformly chosen template with `label`.
pub fn augment_text<R: Rng + ?Sized>(label: &str, rng: &mut R) -> String {
    apply_template(label, rng.random_range(0..TEXT_TEMPLATES.len()))
}

pub fn apply_template(label: &str, template: usize) -> String {
    TEXT_TEMPLATES[template].replace("[CLS]", label)
}

/// Strips a known template prefix and canonicalizes case and separators, so
/// `"The sound of Dog bark"` and `"dog_bark"` name the same class.
pub fn canonical_label(text: &str) -> String {
    let mut s = text.trim();
    for template in TEXT_TEMPLATES.iter().skip(1) {
        let prefix = template.trim_end_matches("[CLS]");
        if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            s = &s[prefix.len()..];
            break;
        }
    }
    s.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}
