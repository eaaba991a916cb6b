//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail. The toy end-to-end and few-shot checks train real
//! models and take hours on a CPU.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use tse_core::audio::{Audio, SAMPLE_RATE};
use tse_core::backbone::layers::{layer_norm, Linear};
use tse_core::backbone::{rope_rotate, Backbone, BackboneConfig};
use tse_core::codec::{frames_for, reconstruction_snr_db, CodecPlugin, DefaultCodec};
use tse_core::conditioning::{DefaultEmbedder, EmbedderConfig, Provenance, ReferenceEmbedding, EMBEDDING_DIM};
use tse_core::diffusion::{
    cfg_combine, forward_sample, recover_noise, recover_x0, sample, velocity, Condition, NoiseSchedule, Predictor,
    SamplerConfig, ScheduleConfig,
};
use tse_core::eval::{
    embedding_cosine, evaluate, frechet_distance, paired_kl, planned_eval_items, ClassifierConfig, DiffusionExtractor,
    EvalItem, EvalMetadata, EvalReport, MixtureExtractor, OracleExtractor, QueryMode, ToyClassifier, FD_EPSILON,
    KL_EPSILON,
};
use tse_core::latent::{LatentSequence, Velocity, LATENT_CHANNELS};
use tse_core::matrix::Matrix;
use tse_core::synth::toy::{toy_corpus, ToyCorpusConfig};
use tse_core::synth::{
    build_dataset, generate_specs, snr_gain, synthesize_components, synthesize_mixture, AssetStore, CorpusManifest,
    DatasetConfig, PlannedItem, Split, BACKGROUND_CLASS,
};
use tse_core::trainer::{
    finetune, initial_state, prepare_planned, train, LrSchedule, OutputDir, ReferenceMode, TrainConfig,
    TrainingExample,
};
use tse_core::Checkpoint32;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn latent(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LatentSequence<f64> {
    LatentSequence::new(gaussian(rng, rows, cols)).unwrap()
}

fn max_abs(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.max_abs_diff(b)
}

fn algebraic_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let plain = NoiseSchedule::build(1000, 0.00085, 0.012).unwrap();
    let rescaled = plain.rescale_terminal().unwrap();
    let (mut round_trip, mut noise) = (0f64, 0f64);
    for i in 0..1000 {
        let s = if i % 2 == 0 { &plain } else { &rescaled };
        let t = rng.random_range(1..=s.steps());
        let x0 = latent(&mut rng, 4, LATENT_CHANNELS);
        let eps = latent(&mut rng, 4, LATENT_CHANNELS);
        let x_t = forward_sample(&x0, &eps, t, s).unwrap();
        let v = velocity(&x0, &eps, t, s).unwrap();
        round_trip = round_trip.max(max_abs(recover_x0(&x_t, &v, t, s).unwrap().matrix(), x0.matrix()));
        noise = noise.max(max_abs(recover_noise(&x_t, &v, t, s).unwrap().matrix(), eps.matrix()));
    }
    let elapsed = start.elapsed();
    check!(round_trip <= 1e-6, "x0 round trip error {round_trip:e}");
    check!(noise <= 1e-6, "noise recovery error {noise:e}");
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("x0 err {round_trip:.1e}, eps err {noise:.1e}, {elapsed:.2?}"))
}

fn schedule_suite() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::build(1000, 0.00085, 0.012).unwrap();
    check!(s.beta(1) == 0.00085 && s.beta(1000) == 0.012, "beta endpoints {} {}", s.beta(1), s.beta(1000));
    let r = s.rescale_terminal().unwrap();
    check!(r.sqrt_alpha_bar(1) == s.sqrt_alpha_bar(1), "sqrt(abar_1) moved");
    check!(r.sqrt_alpha_bar(1000) == 0.0, "sqrt(abar_T) = {}", r.sqrt_alpha_bar(1000));
    check!(r.sqrt_alpha_bars().windows(2).all(|w| w[0] > w[1]), "rescaled ladder not strictly decreasing");

    // T = 4: products of (1 - beta) by hand, then shift-and-scale of the
    // square roots so the first is kept and the last is zero.
    let betas = [0.1, 0.2, 0.3, 0.4];
    let s4 = NoiseSchedule::from_betas(betas.to_vec()).unwrap();
    let mut prod = 1.0;
    let abar: Vec<f64> = betas.iter().map(|b| { prod *= 1.0 - b; prod }).collect();
    for (want, got) in [0.9, 0.72, 0.504, 0.3024].iter().zip(&abar) {
        check!((want - got).abs() < 1e-12, "hand product {got} vs {want}");
    }
    for (got, want) in s4.alpha_bars().iter().zip(&abar) {
        check!((got - want).abs() <= 1e-5, "alpha_bar {got} vs {want}");
    }
    for (got, want) in s4.sqrt_alpha_bars().iter().zip([0.948683, 0.848528, 0.709930, 0.549909]) {
        check!((got - want).abs() <= 1e-5, "sqrt alpha_bar {got} vs {want}");
    }
    let r4 = s4.rescale_terminal().unwrap();
    for (got, want) in r4.sqrt_alpha_bars().iter().zip([0.948683, 0.710424, 0.380691, 0.0]) {
        check!((got - want).abs() <= 1e-5, "rescaled {got} vs {want}");
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{elapsed:.2?}"))
}

fn cfg_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ident, mut affine) = (0f64, 0f64);
    for _ in 0..100 {
        let a = Velocity::new(gaussian(&mut rng, 3, 16));
        let b = Velocity::new(gaussian(&mut rng, 3, 16));
        ident = ident.max(max_abs(cfg_combine(&a, &b, 1.0).unwrap().matrix(), a.matrix()));
        ident = ident.max(max_abs(cfg_combine(&a, &b, 0.0).unwrap().matrix(), b.matrix()));
        let g1 = rng.random_range(0.0..8.0);
        let g2 = rng.random_range(0.0..8.0);
        let mut lhs = cfg_combine(&a, &b, g1).unwrap().into_matrix();
        lhs.add_assign(cfg_combine(&a, &b, g2).unwrap().matrix());
        let mut rhs = cfg_combine(&a, &b, (g1 + g2) / 2.0).unwrap().into_matrix();
        rhs.scale(2.0);
        affine = affine.max(max_abs(&lhs, &rhs));
    }
    let one = Velocity::new(Matrix::from_vec(1, 1, vec![1.0]));
    let zero = Velocity::new(Matrix::from_vec(1, 1, vec![0.0]));
    let scalar: f64 = cfg_combine(&one, &zero, 2.5).unwrap().matrix().get(0, 0);
    check!(ident <= 1e-12, "gamma 0/1 identity error {ident:e}");
    check!(affine <= 1e-9, "affinity error {affine:e}");
    check!((scalar - 2.5).abs() <= 1e-12, "scalar example {scalar}");
    Ok(format!("identity err {ident:.1e}, affinity err {affine:.1e}"))
}

fn randomize(model: &mut Backbone<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
}

fn random_reference(rng: &mut ChaCha8Rng) -> ReferenceEmbedding<f64> {
    let v = (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(rng)).collect();
    ReferenceEmbedding::from_unnormalized(v, Provenance::Audio).unwrap()
}

fn backbone_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // With zero gates every block is the identity, so the model reduces to
    // the output head on the normalized input projection.
    let mut identity = 0f64;
    for (cfg, seed) in [(BackboneConfig::tiny(), 1), (BackboneConfig::toy(), 2)] {
        let mut model = Backbone::<f64>::new(cfg.clone(), seed).unwrap();
        model.out = Linear::xavier(cfg.width, LATENT_CHANNELS, &mut rng);
        let (x_t, x_m) = (latent(&mut rng, 9, LATENT_CHANNELS), latent(&mut rng, 9, LATENT_CHANNELS));
        let r = random_reference(&mut rng);
        let v = model.forward(&x_t, &x_m, Condition::Reference(&r), 37).unwrap();
        let h0 = model.in_proj.forward(&x_t.matrix().hconcat(x_m.matrix()));
        identity = identity.max(max_abs(v.matrix(), &model.out.forward(&layer_norm(&h0).0)));
    }
    check!(identity <= 1e-6, "identity at init error {identity:e}");

    let (mut norm, mut relative) = (0f64, 0f64);
    for _ in 0..200 {
        let q = gaussian(&mut rng, 1, 64);
        let k = gaussian(&mut rng, 1, 64);
        let pos = rng.random_range(0..10_000);
        let rq = rope_rotate(&q, &[pos], 10_000.0).unwrap();
        norm = norm.max((q.sum_sq().sqrt() - rq.sum_sq().sqrt()).abs());
        let dot = |m: usize, n: usize| {
            let a = rope_rotate(&q, &[m], 10_000.0).unwrap();
            let b = rope_rotate(&k, &[n], 10_000.0).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        relative = relative.max((dot(3, 1) - dot(5, 3)).abs());
    }
    check!(norm <= 1e-6, "RoPE norm error {norm:e}");
    check!(relative <= 1e-6, "RoPE relative-position error {relative:e}");

    // Central differences on about 1% of every tensor of the tiny model.
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    randomize(&mut model, 0.15, 11);
    let (x_t, x_m) = (latent(&mut rng, 5, LATENT_CHANNELS), latent(&mut rng, 5, LATENT_CHANNELS));
    let w = gaussian(&mut rng, 5, LATENT_CHANNELS);
    let r = random_reference(&mut rng);
    let mut worst = 0f64;
    let mut checked = 0;
    for cond in [Condition::Reference(&r), Condition::Null] {
        let loss = |m: &Backbone<f64>| {
            let v = m.forward(&x_t, &x_m, cond, 17).unwrap();
            v.matrix().data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = model.forward_cached(&x_t, &x_m, cond, 17).unwrap();
        let mut grad = model.zeros_like();
        model.backward(&cache, &w, &mut grad);
        let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, g)| g.to_vec()).collect();
        let h = 1e-5;
        for (ti, g) in grads.iter().enumerate() {
            for _ in 0..(g.len() / 100).max(1) {
                let idx = rng.random_range(0..g.len());
                let mut plus = model.clone();
                plus.tensors_mut()[ti].1[idx] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].1[idx] -= h;
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (num - g[idx]).abs() / (num.abs().max(g[idx].abs()) + 1e-8);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    check!(worst <= 1e-3, "worst relative gradient error {worst:e}");
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "identity {identity:.1e}, rope {norm:.1e}/{relative:.1e}, grad {worst:.1e} over {checked} entries, {elapsed:.1?}"
    ))
}

fn codec_suite() -> Outcome {
    let codec = DefaultCodec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let n: usize = rng.random_range(12_000..72_000);
        let partials: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=5))
            .map(|_| (rng.random_range(60.0..3000.0), rng.random_range(0.02..0.3), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let samples: Vec<f32> = (0..n)
            .map(|k| {
                let t = k as f64 / SAMPLE_RATE as f64;
                partials.iter().map(|&(f, a, p)| a * (2.0 * std::f64::consts::PI * f * t + p).sin()).sum::<f64>() as f32
            })
            .collect();
        let x = Audio::new(samples, SAMPLE_RATE);
        let z: LatentSequence<f64> = codec.encode(&x).unwrap();
        check!(z.frames() == n.div_ceil(480), "{n} samples gave {} frames", z.frames());
        let y = codec.decode(&z).unwrap();
        check!(y.len() >= n && y.len() - n < 480, "decoded {} samples for {n}", y.len());
        worst = worst.min(reconstruction_snr_db(&x.samples, &y.samples[..n]));
    }
    check!(worst >= 40.0, "worst round-trip SNR {worst:.1} dB");
    for n in [1usize, 479, 480, 481, 24_000, 240_000, 240_001] {
        check!(frames_for(n) == n.div_ceil(480), "frames_for({n}) = {}", frames_for(n));
        let z: LatentSequence<f64> = codec.encode(&Audio::silence(n, SAMPLE_RATE)).unwrap();
        check!(z.frames() == n.div_ceil(480), "encode of {n} samples gave {} frames", z.frames());
    }
    Ok(format!("worst SNR {worst:.1} dB over 20 signals"))
}

fn tree_digest(dir: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    let mut h = Sha256::new();
    for (name, bytes) in &files {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    format!("{} files {:x}", files.len(), h.finalize())
}

fn synthesis_suite() -> Outcome {
    for (t, i, snr, want) in [(0.3, 0.3, 0.0, 1.0), (0.1, 0.2, 10.0, 0.158114), (0.2, 0.2, -10.0, 3.162278)] {
        let g = snr_gain(t, i, snr).unwrap();
        check!((g - want).abs() <= 1e-6, "snr_gain({t}, {i}, {snr}) = {g}, want {want}");
    }

    let small = ToyCorpusConfig { assets_per_class: 5, background_assets: 3, ..Default::default() };
    let (corpus, assets) = toy_corpus(&small);
    let cfg = DatasetConfig { duration_secs: 1.0, mixtures_per_file: 1, ..Default::default() };
    let digests: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            build_dataset(&cfg, &corpus, &assets, 7, dir.path()).unwrap();
            tree_digest(dir.path())
        })
        .collect();
    check!(digests[0] == digests[1], "dataset trees differ: {} vs {}", digests[0], digests[1]);

    let mut residual = 0f64;
    for p in generate_specs(&cfg, &corpus, 9).unwrap().iter().take(60) {
        let parts = synthesize_components(&p.spec, &assets).unwrap();
        let mix = parts.mixture();
        for k in 0..mix.len() {
            let others: f64 = parts.interferers.iter().map(|l| l[k]).sum::<f64>() + parts.background[k];
            residual = residual.max((mix[k] - others - parts.target[k]).abs());
        }
        // Written files are float32 and may share one peak-safety factor.
        let (m, gt) = synthesize_mixture(&p.spec, &assets).unwrap();
        let peak = parts.target.iter().fold(0f64, |a, v| a.max(v.abs()));
        let gt_peak = gt.samples.iter().fold(0f64, |a, &v| a.max(v.abs() as f64));
        let k = if peak > 0.0 { gt_peak / peak } else { 1.0 };
        for (i, (&mv, &gv)) in m.samples.iter().zip(&gt.samples).enumerate() {
            let others: f64 = parts.interferers.iter().map(|l| l[i]).sum::<f64>() + parts.background[i];
            residual = residual.max((mv as f64 - k * others - gv as f64).abs());
        }
    }
    check!(residual <= 1e-6, "ground-truth residual {residual:e}");

    let (corpus, _) = toy_corpus(&ToyCorpusConfig::default());
    let train_assets = corpus.in_split(Split::Train).filter(|e| e.class != BACKGROUND_CLASS).count();
    let cfg = DatasetConfig {
        mixtures_per_file: 3000usize.div_ceil(train_assets),
        splits: vec![Split::Train],
        ..Default::default()
    };
    let specs = generate_specs(&cfg, &corpus, 11).unwrap();
    check!(specs.len() >= 3000, "{} specs", specs.len());
    check!(specs.len() == train_assets * cfg.mixtures_per_file, "{} rows for {train_assets} assets", specs.len());
    let mut counts = [0usize; 4];
    for p in &specs {
        let s = &p.spec;
        counts[s.interferers.len()] += 1;
        for i in &s.interferers {
            check!((-10.0..=10.0).contains(&i.snr_db), "interferer SNR {}", i.snr_db);
        }
        let bg = s.background.as_ref().ok_or("missing background layer")?;
        check!((-5.0..=10.0).contains(&bg.snr_db), "background SNR {}", bg.snr_db);
    }
    check!(counts[0] == 0, "specs without interferers");
    let fractions: Vec<f64> = counts[1..].iter().map(|&c| c as f64 / specs.len() as f64).collect();
    for f in &fractions {
        check!((f - 1.0 / 3.0).abs() <= 0.05 / 3.0, "interferer count fractions {fractions:?}");
    }
    Ok(format!(
        "{}; {} specs, count fractions {:.3}/{:.3}/{:.3}, residual {residual:.1e}",
        digests[0],
        specs.len(),
        fractions[0],
        fractions[1],
        fractions[2]
    ))
}

struct ExactVelocity {
    x0: LatentSequence<f64>,
    schedule: NoiseSchedule,
}

impl Predictor<f64> for ExactVelocity {
    fn predict(
        &self,
        x_t: &LatentSequence<f64>,
        _x_m: &LatentSequence<f64>,
        _cond: Condition<'_, f64>,
        t: usize,
    ) -> tse_core::Result<Velocity<f64>> {
        let sa = self.schedule.sqrt_alpha_bar(t);
        let so = self.schedule.sqrt_one_minus_alpha_bar(t);
        let eps = x_t.matrix().zip_map(self.x0.matrix(), |xt, x0| (xt - sa * x0) / so);
        velocity(&self.x0, &LatentSequence::new(eps).unwrap(), t, &self.schedule)
    }
}

fn oracle_sampler() -> Outcome {
    let schedule = NoiseSchedule::build(1000, 0.00085, 0.012).unwrap().rescale_terminal().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = latent(&mut rng, 20, LATENT_CHANNELS);
    let oracle = ExactVelocity { x0: x0.clone(), schedule: schedule.clone() };
    let r = random_reference(&mut rng);
    let mut worst = 0f64;
    for (gamma, seed) in [(2.5, 1), (1.0, 2), (3.0, 3)] {
        let cfg = SamplerConfig { steps: 50, guidance_scale: gamma, seed };
        let out = sample(&oracle, &x0, &r, &schedule, &cfg).unwrap();
        worst = worst.max(max_abs(out.matrix(), x0.matrix()));
    }
    check!(worst <= 1e-4, "max error {worst:e}");
    Ok(format!("max error {worst:.1e}"))
}

/// Toy corpus plus the fitted training-free plugins.
struct Toy {
    corpus: CorpusManifest,
    assets: AssetStore,
    codec: DefaultCodec,
    embedder: DefaultEmbedder,
    classifier: ToyClassifier,
    schedule: NoiseSchedule,
}

const CLIP_SECS: f64 = 2.0;
const DIFFUSION_STEPS: usize = 200;
const INFERENCE_STEPS: usize = 25;
const GUIDANCE: f64 = 2.5;
const MIN_TRAIN_MIXTURES: usize = 2000;
const EPOCHS: usize = 36;
const LR: f64 = 1e-3;
const FINAL_LR: f64 = 1e-5;
const BATCH: usize = 16;
const HELD_OUT: &str = "fm_tone";
const FEW_SHOT_MIXTURES_PER_CLIP: usize = 16;
const FEW_SHOT_LR: f64 = 1e-4;
const FEW_SHOT_BATCH: usize = 8;
const FEW_SHOT_EPOCHS: usize = 20;

impl Toy {
    fn new() -> Self {
        let (corpus, assets) = toy_corpus(&ToyCorpusConfig::default());
        let clips: Vec<(&str, &[f32])> = corpus
            .in_split(Split::Train)
            .filter(|e| e.class != BACKGROUND_CLASS)
            .map(|e| (e.class.as_str(), assets.get(&e.id).unwrap().samples.as_slice()))
            .collect();
        let embedder = DefaultEmbedder::fit(EmbedderConfig::default(), clips.clone()).unwrap();
        let classifier = ToyClassifier::fit(ClassifierConfig::default(), clips.clone()).unwrap();
        let mut codec = DefaultCodec::new();
        codec.calibrate(clips.iter().map(|c| c.1)).unwrap();
        let schedule = NoiseSchedule::from_config(&ScheduleConfig { steps: DIFFUSION_STEPS, ..Default::default() }).unwrap();
        Self { corpus, assets, codec, embedder, classifier, schedule }
    }

    fn specs(&self, corpus: &CorpusManifest, split: Split, per_file: usize, seed: u64) -> Vec<PlannedItem> {
        let cfg = DatasetConfig {
            duration_secs: CLIP_SECS,
            mixtures_per_file: per_file,
            splits: vec![split],
            ..Default::default()
        };
        generate_specs(&cfg, corpus, seed).unwrap()
    }

    fn examples(&self, specs: &[PlannedItem], seed: u64) -> Vec<TrainingExample<f32>> {
        prepare_planned(specs, &self.assets, &self.codec, &self.embedder, ReferenceMode::Audio, seed).unwrap()
    }

    /// Trains a toy backbone on `corpus`'s training split. Set
    /// `TSE_ACCEPTANCE_CACHE` to a directory to reuse trained models
    /// across runs.
    fn train_model(&self, corpus: &CorpusManifest, skip: bool, tag: &str) -> Checkpoint32 {
        let cache = std::env::var_os("TSE_ACCEPTANCE_CACHE")
            .map(|dir| Path::new(&dir).join(format!("{}-e{EPOCHS}-lr{LR}.ckpt", tag.replace(' ', "_"))));
        if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
            eprintln!("  [{tag}] loaded {}", path.display());
            return Checkpoint32::load(path).unwrap();
        }
        let train_assets = corpus.in_split(Split::Train).filter(|e| e.class != BACKGROUND_CLASS).count();
        let specs = self.specs(corpus, Split::Train, MIN_TRAIN_MIXTURES.div_ceil(train_assets), 1);
        let valid = self.examples(&self.specs(corpus, Split::Valid, 1, 3), 6);
        let train_set = self.examples(&specs, 5);
        let mut bc = BackboneConfig::toy();
        bc.skip_connections = skip;
        let model = Backbone::<f32>::new(bc, 1).unwrap();
        let cfg = TrainConfig {
            lr: LR,
            lr_schedule: LrSchedule::Cosine,
            final_lr: FINAL_LR,
            batch_size: BATCH,
            epochs: EPOCHS,
            seed: 1,
            ..Default::default()
        };
        let start = Instant::now();
        let out = train(&cfg, initial_state(model, self.schedule.clone()), &train_set, &valid, &OutputDir::none()).unwrap();
        let last = out.history.last().unwrap();
        eprintln!(
            "  [{tag}] {} mixtures, {EPOCHS} epochs in {:.0?}, final train loss {:.4}",
            train_set.len(),
            start.elapsed(),
            last.train_loss
        );
        if let Some(path) = &cache {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            out.last.save(path).unwrap();
        }
        out.last
    }

    fn score(&self, items: &[EvalItem], model: &Backbone<f32>) -> EvalReport {
        let extractor = DiffusionExtractor {
            model,
            codec: &self.codec,
            embedder: &self.embedder,
            schedule: &self.schedule,
            sampler: SamplerConfig { steps: INFERENCE_STEPS, guidance_scale: GUIDANCE, seed: 3 },
            query: QueryMode::Audio,
        };
        evaluate(items, &extractor, &self.embedder, &self.classifier, EvalMetadata::default()).unwrap()
    }

    fn baseline(&self, items: &[EvalItem]) -> EvalReport {
        evaluate(items, &MixtureExtractor, &self.embedder, &self.classifier, EvalMetadata::default()).unwrap()
    }

    fn without_class(&self, class: &str) -> CorpusManifest {
        let mut c = self.corpus.clone();
        c.entries.retain(|e| e.class != class);
        c
    }
}

fn metric_suite(toy: &Toy) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let set: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let same = frechet_distance(&set, &set).unwrap();
    check!(same.abs() <= 1e-6, "FD of identical sets {same:e}");
    let zeros = vec![vec![0.0]; 20];
    let threes = vec![vec![3.0]; 20];
    let fd = frechet_distance(&zeros, &threes).unwrap();
    check!((fd - 9.0).abs() <= 10.0 * FD_EPSILON, "constant sets FD {fd}");
    let other: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| 0.5 + 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()).collect();
    let (ab, ba) = (frechet_distance(&set, &other).unwrap(), frechet_distance(&other, &set).unwrap());
    check!((ab - ba).abs() <= 1e-9, "FD asymmetry {ab} vs {ba}");

    let p = [0.2, 0.5, 0.3];
    check!(paired_kl(&p, &p, KL_EPSILON).unwrap().abs() <= 1e-12, "KL of identical posteriors");
    let kl = paired_kl(&[1.0, 0.0], &[0.5, 0.5], KL_EPSILON).unwrap();
    check!((kl - std::f64::consts::LN_2).abs() <= 1e-6, "KL example {kl}");
    for _ in 0..200 {
        let raw: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let raw2: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x / v.iter().sum::<f64>()).collect::<Vec<_>>();
        check!(paired_kl(&norm(&raw), &norm(&raw2), KL_EPSILON).unwrap() >= 0.0, "negative KL");
    }

    let a = [0.3, -1.2, 2.0];
    let cos = |x: &[f64], y: &[f64]| embedding_cosine(x, y).unwrap();
    check!((cos(&a, &a) - 1.0).abs() <= 1e-12, "cos(a, a)");
    check!(cos(&[1.0, 0.0], &[0.0, 2.0]).abs() <= 1e-12, "orthogonal cosine");
    check!((cos(&a, &a.map(|v| 2.0 * v)) - 1.0).abs() <= 1e-12, "scale invariance");

    let specs = toy.specs(&toy.corpus, Split::Test, 3, 2);
    let items = planned_eval_items(&specs, &toy.assets).unwrap();
    let report = evaluate(&items, &OracleExtractor, &toy.embedder, &toy.classifier, EvalMetadata::default()).unwrap();
    let worst_cos = report.items.iter().map(|r| r.cosine_audio).fold(f64::INFINITY, f64::min);
    let worst_kl = report.items.iter().map(|r| r.kl).fold(0.0, f64::max);
    check!(worst_cos >= 0.999, "oracle cosine {worst_cos}");
    check!(worst_kl <= 1e-3, "oracle KL {worst_kl:e}");
    Ok(format!(
        "oracle over {} items: min cosine {worst_cos:.6}, max KL {worst_kl:.1e}, FD {:.1e}",
        report.items.len(),
        report.aggregates.fd
    ))
}

fn end_to_end(toy: &Toy) -> Outcome {
    let specs = toy.specs(&toy.corpus, Split::Test, 3, 2);
    let items = planned_eval_items(&specs, &toy.assets).unwrap();
    check!(items.len() >= 100, "only {} held-out items", items.len());
    let classes: Vec<String> = toy.corpus.classes().into_iter().filter(|c| c != BACKGROUND_CLASS).collect();
    check!(classes.len() == 8, "{} classes", classes.len());
    let base = toy.baseline(&items);

    let full = toy.train_model(&toy.corpus, true, "skip");
    let report = toy.score(&items, &full.model);
    let model_mean = report.aggregates.mean_cosine_audio;
    let mix_mean = base.aggregates.mean_cosine_audio;
    let wins = report.items.iter().zip(&base.items).filter(|(m, b)| m.cosine_audio > b.cosine_audio).count();
    let win_rate = wins as f64 / items.len() as f64;

    let ablation = toy.train_model(&toy.corpus, false, "no-skip");
    let no_skip = toy.score(&items, &ablation.model).aggregates.mean_cosine_audio;
    let direction = if no_skip <= model_mean {
        "no-skip is worse, as expected"
    } else if no_skip - model_mean <= 0.02 {
        "no-skip is better, within 0.02"
    } else {
        "no-skip is better by more than 0.02"
    };
    println!("INFO  skip ablation: skip {model_mean:.4}, no-skip {no_skip:.4} ({direction})");

    let detail = format!(
        "{} items: model {model_mean:.4} vs mixture {mix_mean:.4} (gap {:.4}), wins {wins}/{} ({:.0}%), FD {:.2}/{:.2}, KL {:.3}/{:.3}",
        items.len(),
        model_mean - mix_mean,
        items.len(),
        100.0 * win_rate,
        report.aggregates.fd,
        base.aggregates.fd,
        report.aggregates.mean_kl,
        base.aggregates.mean_kl
    );
    check!(model_mean - mix_mean >= 0.10, "{detail}");
    check!(win_rate >= 0.70, "{detail}");
    Ok(detail)
}

fn few_shot(toy: &Toy) -> Outcome {
    let seen = toy.without_class(HELD_OUT);
    let base = toy.train_model(&seen, true, "7-class base");

    let test: Vec<PlannedItem> = toy
        .specs(&toy.corpus, Split::Test, 6, 21)
        .into_iter()
        .filter(|p| p.spec.target.class == HELD_OUT)
        .collect();
    let items = planned_eval_items(&test, &toy.assets).unwrap();

    // Fine-tuning mixtures for the first k training clips of the new class.
    let pool = toy.specs(&toy.corpus, Split::Train, FEW_SHOT_MIXTURES_PER_CLIP, 22);
    let clips: Vec<String> = toy
        .corpus
        .in_split(Split::Train)
        .filter(|e| e.class == HELD_OUT)
        .map(|e| e.id.clone())
        .collect();
    let shots = |k: usize| -> Vec<PlannedItem> {
        pool.iter().filter(|p| clips[..k].contains(&p.spec.target.asset)).cloned().collect()
    };
    check!(clips.len() >= 10, "only {} training clips of {HELD_OUT}", clips.len());

    let zero = toy.score(&items, &base.model).aggregates.mean_cosine_audio;
    let mut cfg = TrainConfig { seed: 1, ..Default::default() };
    cfg.few_shot.lr = FEW_SHOT_LR;
    cfg.few_shot.batch_size = FEW_SHOT_BATCH;
    cfg.few_shot.epochs = FEW_SHOT_EPOCHS;
    let mut means = BTreeMap::new();
    for k in [1usize, 10] {
        let examples = toy.examples(&shots(k), 23);
        let tuned = finetune(base.clone(), &cfg, &examples, &[], &OutputDir::none()).unwrap();
        let mean = toy.score(&items, &tuned.last.model).aggregates.mean_cosine_audio;
        eprintln!("  [{k}-shot] {} mixtures, mean cosine {mean:.4}", examples.len());
        means.insert(k, mean);
    }
    let (one, ten) = (means[&1], means[&10]);
    let mixture = toy.baseline(&items).aggregates.mean_cosine_audio;
    let detail = format!(
        "{HELD_OUT}, {} items: zero-shot {zero:.4}, 1-shot {one:.4}, 10-shot {ten:.4} (mixture {mixture:.4})",
        items.len()
    );
    check!(zero < one && one <= ten, "{detail}");
    check!(ten - zero >= 0.05, "{detail}");
    Ok(detail)
}

fn run(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
        Err(detail) => println!("FAIL  {name}: {detail} [{secs:.1}s]"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, "1 algebraic identities", algebraic_identities);
    run(&mut results, "2 noise schedule", schedule_suite);
    run(&mut results, "3 classifier-free guidance", cfg_suite);
    run(&mut results, "4 backbone", backbone_suite);
    run(&mut results, "5 latent codec", codec_suite);
    run(&mut results, "6 mixture synthesis", synthesis_suite);
    run(&mut results, "7 oracle sampler", oracle_sampler);
    let toy = Toy::new();
    run(&mut results, "10 metrics", || metric_suite(&toy));
    run(&mut results, "8 toy end-to-end", || end_to_end(&toy));
    run(&mut results, "9 few-shot", || few_shot(&toy));
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
