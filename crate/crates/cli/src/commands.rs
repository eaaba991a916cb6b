use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tse_core::audio::{Audio, WavFormat, SAMPLE_RATE};
use tse_core::backbone::Backbone;
use tse_core::codec::DefaultCodec;
use tse_core::conditioning::{embed_audio_reference, embed_text_reference, DefaultEmbedder};
use tse_core::diffusion::{NoiseSchedule, SamplerConfig, AUDIO_GUIDANCE, TEXT_GUIDANCE};
use tse_core::eval::{
    evaluate, extract_with_model, load_eval_items, ClassifierPlugin, DiffusionExtractor, EvalMetadata, Extractor,
    MixtureExtractor, OracleExtractor, QueryMode, ToyClassifier,
};
use tse_core::scalar::Scalar;
use tse_core::synth::toy::toy_corpus;
use tse_core::synth::{build_dataset, ingest_corpus, DatasetManifest, Split, BACKGROUND_CLASS};
use tse_core::trainer::{finetune, initial_state, prepare_examples, train, Checkpoint, OutputDir, TrainingExample};

use crate::config::PipelineConfig;
use crate::UsageError;

pub const CODEC_FILE: &str = "codec.json";
pub const EMBEDDER_FILE: &str = "embedder.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const CONFIG_FILE: &str = "config.toml";
const PLUGIN_FILES: [&str; 3] = [CODEC_FILE, EMBEDDER_FILE, CLASSIFIER_FILE];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let text = cfg.to_toml();
    log::info!("resolved configuration:\n{text}");
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn copy_plugins(from: &Path, to: &Path) -> Result<()> {
    for name in PLUGIN_FILES {
        let src = from.join(name);
        if src.exists() && from != to {
            std::fs::copy(&src, to.join(name)).with_context(|| format!("copying {}", src.display()))?;
        }
    }
    Ok(())
}

/// Renders mixtures and fits the codec scale, embedder and classifier on the
/// training split.
pub fn synth_data(cfg: &PipelineConfig, corpus_dir: Option<&Path>, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_config(cfg, out)?;
    let (manifest, assets) = match (corpus_dir, &cfg.corpus.root) {
        (Some(dir), _) => load_corpus(cfg, dir)?,
        (None, Some(root)) if !cfg.corpus.toy => load_corpus(cfg, Path::new(root))?,
        (None, None) if !cfg.corpus.toy => bail!(UsageError("corpus.toy is false and no corpus root given".into())),
        _ => toy_corpus(&cfg.toy),
    };
    log::info!("corpus: {} assets in {} classes", manifest.entries.len(), manifest.classes().len());
    let dataset = build_dataset(&cfg.dataset, &manifest, &assets, cfg.seed, out)?;
    log::info!("dataset: {:?}", dataset.counts());

    let clips: Vec<(&str, &[f32])> = manifest
        .in_split(Split::Train)
        .filter(|e| e.class != BACKGROUND_CLASS)
        .filter_map(|e| assets.get(&e.id).map(|a| (e.class.as_str(), a.samples.as_slice())))
        .collect();
    let mut codec = DefaultCodec::new();
    codec.calibrate(clips.iter().map(|c| c.1))?;
    codec.save(&out.join(CODEC_FILE))?;
    DefaultEmbedder::fit(cfg.embedder.clone(), clips)?.save(&out.join(EMBEDDER_FILE))?;

    let targets: Vec<(String, Audio)> = dataset
        .in_split(Split::Train)
        .map(|item| Ok((item.class.clone(), Audio::read_wav(&out.join(&item.target_path))?)))
        .collect::<tse_core::Result<_>>()?;
    if targets.iter().map(|t| &t.0).collect::<std::collections::BTreeSet<_>>().len() >= 2 {
        let clf = ToyClassifier::fit(
            cfg.classifier.clone(),
            targets.iter().map(|(c, a)| (c.as_str(), a.samples.as_slice())),
        )?;
        clf.save(&out.join(CLASSIFIER_FILE))?;
    } else {
        log::warn!("fewer than two training classes; no evaluation classifier written");
    }
    Ok(())
}

fn load_corpus(
    cfg: &PipelineConfig,
    dir: &Path,
) -> Result<(tse_core::synth::CorpusManifest, tse_core::synth::AssetStore)> {
    let report = ingest_corpus(dir, &cfg.ingest)?;
    if report.skipped_unreadable + report.filtered_duration > 0 {
        log::warn!(
            "skipped {} unreadable and {} out-of-range clips",
            report.skipped_unreadable,
            report.filtered_duration
        );
    }
    Ok((report.manifest, report.assets))
}

fn load_split<T: Scalar>(cfg: &PipelineConfig, data: &Path, split: Split) -> Result<Vec<TrainingExample<T>>> {
    let manifest = DatasetManifest::load(&data.join("manifest.jsonl"))?;
    let codec = DefaultCodec::load(&data.join(CODEC_FILE))?;
    let embedder = DefaultEmbedder::load(&data.join(EMBEDDER_FILE))?;
    let items: Vec<_> = manifest.in_split(split).cloned().collect();
    Ok(prepare_examples(&items, data, &codec, &embedder, cfg.reference_mode, cfg.seed)?)
}

pub fn train_cmd<T: Scalar>(cfg: &PipelineConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let model_cfg = cfg.model.resolve()?;
    create_dir(out)?;
    write_config(cfg, out)?;
    let train_set = load_split::<T>(cfg, data, Split::Train)?;
    let valid_set = load_split::<T>(cfg, data, Split::Valid)?;
    log::info!("{} training and {} validation examples", train_set.len(), valid_set.len());
    let state = match resume {
        Some(path) => Checkpoint::<T>::load(path)?,
        None => {
            let model = Backbone::<T>::new(model_cfg, cfg.seed)?;
            log::info!("{}", model.summary());
            initial_state(model, NoiseSchedule::from_config(&cfg.schedule)?)
        }
    };
    copy_plugins(data, out)?;
    let outcome = train(&cfg.train, state, &train_set, &valid_set, &OutputDir::at(out))?;
    if let Some(last) = outcome.history.last() {
        log::info!("finished after epoch {} (train loss {:.5})", last.epoch + 1, last.train_loss);
    }
    Ok(())
}

/// Fine-tunes on the training split of `data`, optionally limited to some
/// classes and to `shots` items per class.
pub fn finetune_cmd<T: Scalar>(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    classes: &[String],
    shots: Option<usize>,
) -> Result<()> {
    create_dir(out)?;
    write_config(cfg, out)?;
    let base = Checkpoint::<T>::load(checkpoint)?;
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    let examples: Vec<TrainingExample<T>> = load_split::<T>(cfg, data, Split::Train)?
        .into_iter()
        .filter(|e| classes.is_empty() || classes.contains(&e.class))
        .filter(|e| {
            let n = per_class.entry(e.class.clone()).or_insert(0);
            *n += 1;
            shots.is_none_or(|k| *n <= k)
        })
        .collect();
    log::info!("fine-tuning on {} examples", examples.len());
    let valid = load_split::<T>(cfg, data, Split::Valid)?;
    let valid: Vec<_> = valid
        .into_iter()
        .filter(|e| classes.is_empty() || classes.contains(&e.class))
        .collect();
    copy_plugins(data, out)?;
    finetune(base, &cfg.train, &examples, &valid, &OutputDir::at(out))?;
    Ok(())
}

pub struct ExtractArgs {
    pub checkpoint: PathBuf,
    pub assets: Option<PathBuf>,
    pub mixture: PathBuf,
    pub ref_audio: Option<PathBuf>,
    pub ref_text: Option<String>,
    pub gamma: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Everything needed to repeat an extraction.
#[derive(Debug, Serialize)]
pub struct ExtractRecord {
    pub command: &'static str,
    pub version: &'static str,
    pub checkpoint: PathBuf,
    pub codec: PathBuf,
    pub embedder: PathBuf,
    pub mixture: PathBuf,
    pub ref_audio: Option<PathBuf>,
    pub ref_text: Option<String>,
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub sample_rate: u32,
    pub samples: usize,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn extract_cmd<T: Scalar>(args: &ExtractArgs) -> Result<()> {
    let assets = match &args.assets {
        Some(dir) => dir.clone(),
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (codec_path, embedder_path) = (assets.join(CODEC_FILE), assets.join(EMBEDDER_FILE));
    let ckpt = Checkpoint::<T>::load(&args.checkpoint)?;
    let codec = DefaultCodec::load(&codec_path)?;
    let embedder = DefaultEmbedder::load(&embedder_path)?;
    let mixture = Audio::read_wav(&args.mixture)?.resample(SAMPLE_RATE);
    let (reference, default_gamma) = match (&args.ref_audio, &args.ref_text) {
        (Some(path), None) => {
            let audio = Audio::read_wav(path)?.resample(SAMPLE_RATE);
            (embed_audio_reference::<T>(&audio, &embedder)?, AUDIO_GUIDANCE)
        }
        (None, Some(text)) => (embed_text_reference::<T>(text, &embedder)?, TEXT_GUIDANCE),
        _ => bail!(UsageError("exactly one of --ref-audio or --ref-text is required".into())),
    };
    let gamma = args.gamma.unwrap_or(default_gamma);
    let sampler = SamplerConfig {
        steps: args.steps,
        guidance_scale: gamma,
        seed: args.seed,
    };
    let audio = extract_with_model(&ckpt.model, &codec, &ckpt.schedule, &mixture, &reference, &sampler)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    audio.write_wav(&args.out, WavFormat::Float32)?;
    let record = ExtractRecord {
        command: "extract",
        version: env!("CARGO_PKG_VERSION"),
        checkpoint: args.checkpoint.clone(),
        codec: codec_path,
        embedder: embedder_path,
        mixture: args.mixture.clone(),
        ref_audio: args.ref_audio.clone(),
        ref_text: args.ref_text.clone(),
        gamma,
        steps: args.steps,
        seed: args.seed,
        output: args.out.clone(),
        sample_rate: audio.sample_rate,
        samples: audio.len(),
    };
    let side = sidecar_path(&args.out);
    std::fs::write(&side, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", side.display()))?;
    log::info!("wrote {} and {}", args.out.display(), side.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum System {
    /// The trained model given by --checkpoint.
    Model,
    /// Ground truth passed through unchanged.
    Oracle,
    /// The unprocessed mixture.
    Mixture,
}

pub struct EvaluateArgs {
    pub data: PathBuf,
    pub split: Split,
    pub system: System,
    pub checkpoint: Option<PathBuf>,
    pub query: QueryMode,
    pub gamma: Option<f64>,
    pub steps: usize,
    pub limit: Option<usize>,
    pub out: PathBuf,
}

pub fn evaluate_cmd<T: Scalar>(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    create_dir(&args.out)?;
    write_config(cfg, &args.out)?;
    let manifest = DatasetManifest::load(&args.data.join("manifest.jsonl"))?;
    let embedder = DefaultEmbedder::load(&args.data.join(EMBEDDER_FILE))?;
    let classifier = ToyClassifier::load(&args.data.join(CLASSIFIER_FILE))?;
    let codec = DefaultCodec::load(&args.data.join(CODEC_FILE))?;
    let items = load_eval_items(
        manifest.in_split(args.split).take(args.limit.unwrap_or(usize::MAX)),
        &args.data,
    )?;
    let mut metadata = EvalMetadata {
        dataset_id: args.data.display().to_string(),
        seed: cfg.seed,
        ..EvalMetadata::default()
    };
    let ckpt;
    let extractor: Box<dyn Extractor + '_> = match args.system {
        System::Oracle => Box::new(OracleExtractor),
        System::Mixture => Box::new(MixtureExtractor),
        System::Model => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| UsageError("--system model needs --checkpoint".into()))?;
            ckpt = Checkpoint::<T>::load(path)?;
            let gamma = args.gamma.unwrap_or(match args.query {
                QueryMode::Audio => AUDIO_GUIDANCE,
                QueryMode::Text => TEXT_GUIDANCE,
            });
            metadata.model_id = path.display().to_string();
            metadata.guidance_scale = Some(gamma);
            metadata.steps = Some(args.steps);
            Box::new(DiffusionExtractor {
                model: &ckpt.model,
                codec: &codec,
                embedder: &embedder,
                schedule: &ckpt.schedule,
                sampler: SamplerConfig {
                    steps: args.steps,
                    guidance_scale: gamma,
                    seed: cfg.seed,
                },
                query: args.query,
            })
        }
    };
    let report = evaluate(&items, extractor.as_ref(), &embedder, &classifier as &dyn ClassifierPlugin, metadata)?;
    report.write_jsonl(&args.out.join("report.jsonl"))?;
    report.write_csv(&args.out.join("report.csv"))?;
    let a = &report.aggregates;
    println!(
        "{}: items {} skipped {} FD {:.4} KL {:.4} cosine_audio {:.4}",
        report.metadata.extractor, a.items, a.skipped, a.fd, a.mean_kl, a.mean_cosine_audio
    );
    Ok(())
}
