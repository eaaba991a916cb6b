use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Audio, SAMPLE_RATE};
use crate::codec::CodecPlugin;
use crate::conditioning::{augment_text, embed_audio_reference, embed_text_reference, EmbedderPlugin, ReferenceEmbedding};
use crate::error::{Error, Result};
use crate::latent::LatentSequence;
use crate::scalar::Scalar;
use crate::synth::{synthesize_mixture, AssetStore, DatasetItem, PlannedItem};

/// Cached model inputs for one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub id: String,
    pub class: String,
    pub x0: LatentSequence<T>,
    pub x_m: LatentSequence<T>,
    pub reference: ReferenceEmbedding<T>,
}

/// Which query modality conditions training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    #[default]
    Audio,
    /// Class label passed through a random text template.
    Text,
}

/// Encodes one `(mixture, target, reference)` triple.
#[allow(clippy::too_many_arguments)]
pub fn make_example<T: Scalar, R: rand::Rng>(
    id: &str,
    class: &str,
    mixture: &Audio,
    target: &Audio,
    reference: &Audio,
    codec: &dyn CodecPlugin<T>,
    embedder: &dyn EmbedderPlugin,
    mode: ReferenceMode,
    rng: &mut R,
) -> Result<TrainingExample<T>> {
    let x_m = codec.encode(mixture)?;
    let x0 = codec.encode(target)?;
    if x0.shape() != x_m.shape() {
        return Err(Error::Input(format!("{id}: mixture and target lengths differ")));
    }
    let reference = match mode {
        ReferenceMode::Audio => embed_audio_reference(&reference.resample(SAMPLE_RATE), embedder)?,
        ReferenceMode::Text => embed_text_reference(&augment_text(class, rng), embedder)?,
    };
    Ok(TrainingExample {
        id: id.to_string(),
        class: class.to_string(),
        x0,
        x_m,
        reference,
    })
}

/// Reads a built dataset from disk and encodes it.
pub fn prepare_examples<T: Scalar>(
    items: &[DatasetItem],
    dataset_dir: &Path,
    codec: &dyn CodecPlugin<T>,
    embedder: &dyn EmbedderPlugin,
    mode: ReferenceMode,
    seed: u64,
) -> Result<Vec<TrainingExample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|item| {
            let read = |rel: &str| Audio::read_wav(&dataset_dir.join(rel)).map(|a| a.resample(SAMPLE_RATE));
            make_example(
                &item.id,
                &item.class,
                &read(&item.mixture_path)?,
                &read(&item.target_path)?,
                &read(&item.reference_path)?,
                codec,
                embedder,
                mode,
                &mut rng,
            )
        })
        .collect()
}

/// Synthesizes planned mixtures in memory and encodes them.
pub fn prepare_planned<T: Scalar>(
    items: &[PlannedItem],
    assets: &AssetStore,
    codec: &dyn CodecPlugin<T>,
    embedder: &dyn EmbedderPlugin,
    mode: ReferenceMode,
    seed: u64,
) -> Result<Vec<TrainingExample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|p| {
            let (mix, target) = synthesize_mixture(&p.spec, assets)?;
            let reference = assets.get(&p.reference_asset).ok_or_else(|| Error::Lookup {
                kind: "asset",
                key: p.reference_asset.clone(),
            })?;
            make_example(&p.id, &p.spec.target.class, &mix, &target, reference, codec, embedder, mode, &mut rng)
        })
        .collect()
}
