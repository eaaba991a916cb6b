//! Mixture simulation: one target, 1-3 interferers and a background layered
//! at controlled SNRs, with manifests that make every file reproducible.

mod corpus;
mod dataset;
pub mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use corpus::{ingest_corpus, AssetStore, CorpusEntry, CorpusManifest, IngestConfig, IngestReport, Split};
pub use dataset::{build_dataset, generate_specs, DatasetConfig, DatasetItem, DatasetManifest, PlannedItem};

use crate::audio::{rms, Audio, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Class label reserved for background-noise assets.
pub const BACKGROUND_CLASS: &str = "background";
/// Peak ceiling for written mixtures.
pub const PEAK_LIMIT: f64 = 0.999;

/// Gain `g` that puts an interferer at `snr_db` below the target:
/// `20 log10(target_rms / (g interferer_rms)) = snr_db`.
pub fn snr_gain(target_rms: f64, interferer_rms: f64, snr_db: f64) -> Result<f64> {
    if !(target_rms > 0.0 && interferer_rms > 0.0) {
        return Err(Error::Numeric(format!(
            "SNR gain needs positive RMS values, got {target_rms} and {interferer_rms}"
        )));
    }
    Ok(target_rms / (interferer_rms * 10f64.powf(snr_db / 20.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub asset: String,
    pub class: String,
    /// Seconds from the start of the clip.
    pub onset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfererSpec {
    pub asset: String,
    pub class: String,
    pub onset: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub asset: String,
    pub snr_db: f64,
}

/// Full recipe for one mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub target: EventSpec,
    pub interferers: Vec<InterfererSpec>,
    pub background: Option<BackgroundSpec>,
    pub duration: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn samples(&self) -> usize {
        (self.duration * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::param(format!("mixture duration must be positive, got {}", self.duration)));
        }
        if !(1..=3).contains(&self.interferers.len()) {
            return Err(Error::param(format!("{} interferers, expected 1 to 3", self.interferers.len())));
        }
        let onsets = std::iter::once(self.target.onset).chain(self.interferers.iter().map(|i| i.onset));
        for onset in onsets {
            if !(0.0..self.duration).contains(&onset) {
                return Err(Error::param(format!("onset {onset} s outside [0, {})", self.duration)));
            }
        }
        Ok(())
    }
}

/// Every layer of a mixture before peak limiting.
#[derive(Debug, Clone)]
pub struct MixtureComponents {
    pub target: Vec<f64>,
    pub interferers: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    /// Gains actually applied to each interferer and to the background.
    pub interferer_gains: Vec<f64>,
    pub background_gain: f64,
}

impl MixtureComponents {
    pub fn mixture(&self) -> Vec<f64> {
        let mut mix = self.target.clone();
        for layer in self.interferers.iter().chain(std::iter::once(&self.background)) {
            for (m, &v) in mix.iter_mut().zip(layer) {
                *m += v;
            }
        }
        mix
    }
}

fn place(buf: &mut [f64], source: &[f32], onset: f64, gain: f64) -> bool {
    let start = (onset * SAMPLE_RATE as f64).round() as usize;
    let room = buf.len().saturating_sub(start);
    let from = start.min(buf.len());
    for (b, &s) in buf[from..].iter_mut().zip(source) {
        *b += gain * s as f64;
    }
    source.len() > room
}

fn lookup<'a>(assets: &'a AssetStore, id: &str) -> Result<&'a Audio> {
    assets.get(id).ok_or_else(|| Error::Lookup {
        kind: "asset",
        key: id.to_string(),
    })
}

/// Scaled and placed layers; SNRs are referenced to the target asset's RMS.
/// An infinite SNR silences that layer.
pub fn synthesize_components(spec: &MixtureSpec, assets: &AssetStore) -> Result<MixtureComponents> {
    spec.validate()?;
    let n = spec.samples();
    let target = lookup(assets, &spec.target.asset)?;
    let target_rms = target.rms();
    let mut target_buf = vec![0.0; n];
    if place(&mut target_buf, &target.samples, spec.target.onset, 1.0) {
        log::info!("target {} truncated at the clip edge", spec.target.asset);
    }
    let gain_for = |audio: &Audio, snr_db: f64| -> Result<f64> {
        if snr_db == f64::INFINITY {
            Ok(0.0)
        } else {
            snr_gain(target_rms, audio.rms(), snr_db)
        }
    };
    let mut interferers = Vec::with_capacity(spec.interferers.len());
    let mut interferer_gains = Vec::with_capacity(spec.interferers.len());
    for i in &spec.interferers {
        let audio = lookup(assets, &i.asset)?;
        let g = gain_for(audio, i.snr_db)?;
        let mut buf = vec![0.0; n];
        place(&mut buf, &audio.samples, i.onset, g);
        interferers.push(buf);
        interferer_gains.push(g);
    }
    let mut background = vec![0.0; n];
    let mut background_gain = 0.0;
    if let Some(bg) = &spec.background {
        let audio = lookup(assets, &bg.asset)?;
        background_gain = gain_for(audio, bg.snr_db)?;
        if !audio.samples.is_empty() {
            // loop to cover the whole clip
            for (k, b) in background.iter_mut().enumerate() {
                *b = background_gain * audio.samples[k % audio.samples.len()] as f64;
            }
        }
    }
    Ok(MixtureComponents {
        target: target_buf,
        interferers,
        background,
        interferer_gains,
        background_gain,
    })
}

/// Renders `(mixture, ground-truth target)`. When the mixture peak exceeds
/// [`PEAK_LIMIT`] both are scaled by the same factor.
pub fn synthesize_mixture(spec: &MixtureSpec, assets: &AssetStore) -> Result<(Audio, Audio)> {
    let parts = synthesize_components(spec, assets)?;
    let mix = parts.mixture();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    let to_audio = |v: &[f64]| Audio::new(v.iter().map(|x| (x * scale) as f32).collect(), SAMPLE_RATE);
    Ok((to_audio(&mix), to_audio(&parts.target)))
}

/// Asset RMS values, handy for SNR checks.
pub fn asset_rms(assets: &AssetStore) -> BTreeMap<String, f64> {
    assets.iter().map(|(id, a)| (id.clone(), rms(&a.samples))).collect()
}
