//! Skip-connected diffusion transformer predicting velocity from a noisy
//! latent, the mixture latent, a reference embedding and the timestep.

mod attention;
mod block;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use attention::{rope_rotate, Attention, RopeTable};
pub use block::{DitBlock, Modulation};
use block::BlockCache;
use layers::{layer_norm, layer_norm_backward, modulate, modulate_backward, silu, silu_grad, Linear};

use crate::conditioning::{Provenance, ReferenceEmbedding, EMBEDDING_DIM};
use crate::diffusion::{Condition, Predictor};
use crate::error::{Error, Result};
use crate::latent::{LatentSequence, Velocity, LATENT_CHANNELS};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Size of the raw sinusoidal timestep features.
pub const TIME_FREQ_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub latent_channels: usize,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    /// Long skips between shallow and deep blocks. Turning them off is an
    /// ablation.
    pub skip_connections: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl BackboneConfig {
    /// Full-size model: 12 blocks, width 768, 12 heads.
    pub fn full() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            latent_channels: LATENT_CHANNELS,
            rope_base: 10_000.0,
            mlp_ratio: 4,
            skip_connections: true,
        }
    }

    /// Desk-scale model used for the toy experiments.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            width: 192,
            heads: 4,
            ..Self::full()
        }
    }

    /// Smallest useful model, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            width: 32,
            heads: 2,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Configuration(format!("unknown backbone preset {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Configuration(msg));
        if self.depth == 0 || self.depth % 2 != 0 {
            return bad(format!("depth must be even and positive, got {}", self.depth));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for RoPE", self.head_dim()));
        }
        if self.latent_channels == 0 || self.mlp_ratio == 0 {
            return bad("latent_channels and mlp_ratio must be positive".into());
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }
}

/// Fused timestep and reference condition, one value per model channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector<T> {
    data: Vec<T>,
}

impl<T: Scalar> ConditionVector<T> {
    pub fn data(&self) -> &[T] {
        &self.data
    }

    fn row(&self) -> Matrix<T> {
        Matrix::row_vector(self.data.clone())
    }
}

/// Standard sinusoidal features `[cos(t f_i), sin(t f_i)]` with
/// `f_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| (-(10_000f64.ln()) * i as f64 / half as f64).exp();
    let mut out: Vec<f64> = (0..half).map(|i| (t * freq(i)).cos()).collect();
    out.extend((0..half).map(|i| (t * freq(i)).sin()));
    out.resize(dim, 0.0);
    out
}

/// Merges a recorded shallow activation into the deep stream with a learned
/// projection of `[deep | shallow]`.
pub fn skip_merge<T: Scalar>(proj: &Linear<T>, shallow: &Matrix<T>, deep: &Matrix<T>) -> Result<Matrix<T>> {
    if shallow.shape() != deep.shape() {
        return Err(Error::param(format!(
            "skip merge shapes differ: {:?} vs {:?}",
            shallow.shape(),
            deep.shape()
        )));
    }
    if proj.inputs() != 2 * deep.cols() {
        return Err(Error::param(format!(
            "skip projection expects {} inputs, got width {}",
            proj.inputs(),
            deep.cols()
        )));
    }
    Ok(proj.forward(&deep.hconcat(shallow)))
}

/// Shape and name of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    pub in_proj: Linear<T>,
    pub time_fc1: Linear<T>,
    pub time_fc2: Linear<T>,
    pub ref_proj: Linear<T>,
    pub null_embedding: Vec<T>,
    pub blocks: Vec<DitBlock<T>>,
    pub final_ada: Linear<T>,
    pub out: Linear<T>,
}

/// Intermediate values kept by [`Backbone::forward_cached`] for backprop.
#[derive(Debug)]
pub struct ForwardCache<T> {
    input: Matrix<T>,
    rope: RopeTable<T>,
    time_raw: Matrix<T>,
    time_pre: Matrix<T>,
    time_act: Matrix<T>,
    reference: Matrix<T>,
    null: bool,
    cond: Matrix<T>,
    cond_act: Matrix<T>,
    blocks: Vec<BlockCache<T>>,
    final_shift_scale: Vec<T>,
    final_xhat: Matrix<T>,
    final_rstd: Vec<T>,
    final_mod: Matrix<T>,
}

impl<T: Scalar> Backbone<T> {
    /// Seeded initialization. Gates, adaLN regressors and the output layer
    /// start at zero, so every block is the identity and the initial
    /// prediction is zero.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let c = config.latent_channels;
        let in_proj = Linear::xavier(2 * c, w, &mut rng);
        let time_fc1 = Linear::normal(TIME_FREQ_DIM, w, 0.02, &mut rng);
        let time_fc2 = Linear::normal(w, w, 0.02, &mut rng);
        let ref_proj = Linear::xavier(EMBEDDING_DIM, w, &mut rng);
        let raw: Vec<f64> = (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let null_embedding = raw.iter().map(|v| T::of(v / norm)).collect();
        let half = config.depth / 2;
        let blocks = (0..config.depth)
            .map(|i| DitBlock::new(w, config.heads, config.mlp_ratio, config.skip_connections && i >= half, &mut rng))
            .collect();
        Ok(Self {
            in_proj,
            time_fc1,
            time_fc2,
            ref_proj,
            null_embedding,
            blocks,
            final_ada: Linear::zeros(w, 2 * w),
            out: Linear::zeros(w, c),
            config,
        })
    }

    /// Same structure, every parameter zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.inputs(), l.outputs());
        Self {
            config: self.config.clone(),
            in_proj: z(&self.in_proj),
            time_fc1: z(&self.time_fc1),
            time_fc2: z(&self.time_fc2),
            ref_proj: z(&self.ref_proj),
            null_embedding: vec![T::zero(); self.null_embedding.len()],
            blocks: self.blocks.iter().map(DitBlock::zeros_like).collect(),
            final_ada: z(&self.final_ada),
            out: z(&self.out),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// The learned unconditional embedding.
    pub fn null_embedding(&self) -> ReferenceEmbedding<T> {
        ReferenceEmbedding::null(self.null_embedding.clone()).expect("null embedding has the embedding dimension")
    }

    /// Timestep embedding: sinusoid, linear, SiLU, linear.
    pub fn time_embedding(&self, t: usize) -> Result<Vec<T>> {
        if t == 0 {
            return Err(Error::param("timestep must be at least 1"));
        }
        Ok(self.time_parts(t).2.into_vec())
    }

    fn time_parts(&self, t: usize) -> (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>) {
        let raw = Matrix::row_vector(sinusoidal_embedding(t as f64, TIME_FREQ_DIM).into_iter().map(T::of).collect());
        let pre = self.time_fc1.forward(&raw);
        let act = pre.map(silu);
        let emb = self.time_fc2.forward(&act);
        (raw, pre, emb, act)
    }

    /// `t_embed + W_ref · ref`.
    pub fn fuse_condition(&self, t_embed: &[T], reference: &[T]) -> Result<ConditionVector<T>> {
        if t_embed.len() != self.config.width {
            return Err(Error::param(format!(
                "timestep embedding has {} dims, model width is {}",
                t_embed.len(),
                self.config.width
            )));
        }
        if reference.len() != EMBEDDING_DIM {
            return Err(Error::param(format!(
                "reference embedding has {} dims, expected {EMBEDDING_DIM}",
                reference.len()
            )));
        }
        let mut data = self.ref_proj.forward(&Matrix::row_vector(reference.to_vec())).into_vec();
        for (d, &e) in data.iter_mut().zip(t_embed) {
            *d += e;
        }
        Ok(ConditionVector { data })
    }

    /// Runs blocks and head on an already fused condition.
    pub fn forward_with_condition(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: &ConditionVector<T>,
    ) -> Result<Velocity<T>> {
        let input = self.check_inputs(x_t, x_m)?;
        if cond.data.len() != self.config.width {
            return Err(Error::param("condition vector does not match model width"));
        }
        let positions: Vec<usize> = (0..input.rows()).collect();
        let rope = RopeTable::new(&positions, self.config.head_dim(), self.config.rope_base)?;
        let cond_act = cond.row().map(silu);
        let h = self.in_proj.forward(&input);
        let (h, _) = self.run_blocks(h, &cond_act, &rope, false);
        let (v, ..) = self.head(&h, &cond_act);
        Ok(Velocity::new(v))
    }

    pub fn forward(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: Condition<'_, T>,
        t: usize,
    ) -> Result<Velocity<T>> {
        let positions: Vec<usize> = (0..x_t.frames()).collect();
        self.forward_with_positions(x_t, x_m, cond, t, &positions)
    }

    /// Forward pass with explicit RoPE positions per frame.
    pub fn forward_with_positions(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: Condition<'_, T>,
        t: usize,
        positions: &[usize],
    ) -> Result<Velocity<T>> {
        let (v, _) = self.forward_impl(x_t, x_m, cond, t, positions, false)?;
        Ok(Velocity::new(v))
    }

    /// Forward pass that keeps activations for [`Backbone::backward`].
    pub fn forward_cached(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: Condition<'_, T>,
        t: usize,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let positions: Vec<usize> = (0..x_t.frames()).collect();
        let (v, cache) = self.forward_impl(x_t, x_m, cond, t, &positions, true)?;
        Ok((v, cache.expect("cache requested")))
    }

    fn check_inputs(&self, x_t: &LatentSequence<T>, x_m: &LatentSequence<T>) -> Result<Matrix<T>> {
        let c = self.config.latent_channels;
        if x_t.channels() != c || x_m.channels() != c {
            return Err(Error::param(format!(
                "latents must have {c} channels, got {} and {}",
                x_t.channels(),
                x_m.channels()
            )));
        }
        if x_t.frames() != x_m.frames() {
            return Err(Error::param(format!(
                "noisy latent has {} frames, mixture has {}",
                x_t.frames(),
                x_m.frames()
            )));
        }
        Ok(x_t.matrix().hconcat(x_m.matrix()))
    }

    fn forward_impl(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: Condition<'_, T>,
        t: usize,
        positions: &[usize],
        keep: bool,
    ) -> Result<(Matrix<T>, Option<ForwardCache<T>>)> {
        let input = self.check_inputs(x_t, x_m)?;
        if positions.len() != input.rows() {
            return Err(Error::param(format!("{} positions for {} frames", positions.len(), input.rows())));
        }
        if t == 0 {
            return Err(Error::param("timestep must be at least 1"));
        }
        let (reference, null) = match cond {
            Condition::Reference(r) => (r.data().to_vec(), r.provenance() == Provenance::Null),
            Condition::Null => (self.null_embedding.clone(), true),
        };
        let (time_raw, time_pre, temb, time_act) = self.time_parts(t);
        let fused = self.fuse_condition(temb.row(0), &reference)?;
        let cond = fused.row();
        let cond_act = cond.map(silu);
        let rope = RopeTable::new(positions, self.config.head_dim(), self.config.rope_base)?;

        let h = self.in_proj.forward(&input);
        let (h, blocks) = self.run_blocks(h, &cond_act, &rope, keep);
        let (v, final_shift_scale, final_xhat, final_rstd, final_mod) = self.head(&h, &cond_act);
        let cache = keep.then(|| ForwardCache {
            input,
            rope,
            time_raw,
            time_pre,
            time_act,
            reference: Matrix::row_vector(reference),
            null,
            cond,
            cond_act,
            blocks,
            final_shift_scale,
            final_xhat,
            final_rstd,
            final_mod,
        });
        Ok((v, cache))
    }

    fn run_blocks(
        &self,
        mut h: Matrix<T>,
        cond_act: &Matrix<T>,
        rope: &RopeTable<T>,
        keep: bool,
    ) -> (Matrix<T>, Vec<BlockCache<T>>) {
        let depth = self.blocks.len();
        let half = depth / 2;
        let mut records: Vec<Matrix<T>> = Vec::with_capacity(half);
        let mut caches = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = (i >= half && block.skip.is_some()).then(|| &records[depth - 1 - i]);
            let (out, cache) = block.forward(&h, skip, cond_act, rope);
            h = out;
            if i < half {
                records.push(h.clone());
            }
            if keep {
                caches.push(cache);
            }
        }
        (h, caches)
    }

    #[allow(clippy::type_complexity)]
    fn head(&self, h: &Matrix<T>, cond_act: &Matrix<T>) -> (Matrix<T>, Vec<T>, Matrix<T>, Vec<T>, Matrix<T>) {
        let w = self.config.width;
        let ss = self.final_ada.forward(cond_act).into_vec();
        let (xhat, rstd) = layer_norm(h);
        let m = modulate(&xhat, &ss[..w], &ss[w..]);
        (self.out.forward(&m), ss, xhat, rstd, m)
    }

    /// Backpropagates `dL/dv` through a cached forward pass, accumulating
    /// parameter gradients into `grad` (a [`Backbone::zeros_like`] buffer).
    pub fn backward(&self, cache: &ForwardCache<T>, dv: &Matrix<T>, grad: &mut Backbone<T>) {
        let w = self.config.width;
        let depth = self.blocks.len();
        let half = depth / 2;

        let dm = self.out.backward(&cache.final_mod, dv, &mut grad.out);
        let (dxhat, dshift, dscale) = modulate_backward(&cache.final_xhat, &cache.final_shift_scale[w..], &dm);
        let mut dh = layer_norm_backward(&cache.final_xhat, &cache.final_rstd, &dxhat);
        let mut dss = dshift;
        dss.extend(dscale);
        let mut dcond_act = self.final_ada.backward(&cache.cond_act, &Matrix::row_vector(dss), &mut grad.final_ada);

        let mut pending: Vec<Option<Matrix<T>>> = vec![None; half];
        for i in (0..depth).rev() {
            if i < half {
                if let Some(ds) = pending[i].take() {
                    dh.add_assign(&ds);
                }
            }
            let (dh_in, dskip, dc) = self.blocks[i].backward(&cache.blocks[i], &dh, &cache.rope, &mut grad.blocks[i]);
            dcond_act.add_assign(&dc);
            if let Some(ds) = dskip {
                pending[depth - 1 - i] = Some(ds);
            }
            dh = dh_in;
        }
        self.in_proj.accumulate(&cache.input, &dh, &mut grad.in_proj);

        let dcond = dcond_act.zip_map(&cache.cond, |d, c| d * silu_grad(c));
        let dref = self.ref_proj.backward(&cache.reference, &dcond, &mut grad.ref_proj);
        if cache.null {
            for (g, &d) in grad.null_embedding.iter_mut().zip(dref.row(0)) {
                *g += d;
            }
        }
        let dact = self.time_fc2.backward(&cache.time_act, &dcond, &mut grad.time_fc2);
        let dpre = dact.zip_map(&cache.time_pre, |d, x| d * silu_grad(x));
        self.time_fc1.accumulate(&cache.time_raw, &dpre, &mut grad.time_fc1);
    }

    /// All parameter tensors under stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        fn lin<'a, T: Scalar>(prefix: String, l: &'a Linear<T>, out: &mut Vec<(String, &'a [T])>) {
            out.push((format!("{prefix}.weight"), l.weight.data()));
            out.push((format!("{prefix}.bias"), l.bias.as_slice()));
        }
        let mut out = Vec::new();
        lin("in_proj".into(), &self.in_proj, &mut out);
        lin("time.fc1".into(), &self.time_fc1, &mut out);
        lin("time.fc2".into(), &self.time_fc2, &mut out);
        lin("ref_proj".into(), &self.ref_proj, &mut out);
        out.push(("null_embedding".into(), self.null_embedding.as_slice()));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, l) in b.linears() {
                lin(format!("blocks.{i}.{name}"), l, &mut out);
            }
        }
        lin("final.ada".into(), &self.final_ada, &mut out);
        lin("out".into(), &self.out, &mut out);
        out
    }

    /// Mutable view in the same order as [`Backbone::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        fn lin<'a, T: Scalar>(prefix: String, l: &'a mut Linear<T>, out: &mut Vec<(String, &'a mut [T])>) {
            out.push((format!("{prefix}.weight"), l.weight.data_mut()));
            out.push((format!("{prefix}.bias"), l.bias.as_mut_slice()));
        }
        let mut out = Vec::new();
        lin("in_proj".into(), &mut self.in_proj, &mut out);
        lin("time.fc1".into(), &mut self.time_fc1, &mut out);
        lin("time.fc2".into(), &mut self.time_fc2, &mut out);
        lin("ref_proj".into(), &mut self.ref_proj, &mut out);
        out.push(("null_embedding".into(), self.null_embedding.as_mut_slice()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, l) in b.linears_mut() {
                lin(format!("blocks.{i}.{name}"), l, &mut out);
            }
        }
        lin("final.ada".into(), &mut self.final_ada, &mut out);
        lin("out".into(), &mut self.out, &mut out);
        out
    }

    /// Names and shapes, matching [`Backbone::tensors`].
    pub fn tensor_info(&self) -> Vec<TensorInfo> {
        fn lin<T: Scalar>(l: &Linear<T>, shapes: &mut Vec<Vec<usize>>) {
            shapes.push(vec![l.inputs(), l.outputs()]);
            shapes.push(vec![l.outputs()]);
        }
        let mut shapes = Vec::new();
        lin(&self.in_proj, &mut shapes);
        lin(&self.time_fc1, &mut shapes);
        lin(&self.time_fc2, &mut shapes);
        lin(&self.ref_proj, &mut shapes);
        shapes.push(vec![self.null_embedding.len()]);
        for b in &self.blocks {
            for (_, l) in b.linears() {
                lin(l, &mut shapes);
            }
        }
        lin(&self.final_ada, &mut shapes);
        lin(&self.out, &mut shapes);
        self.tensors()
            .into_iter()
            .zip(shapes)
            .map(|((name, _), shape)| TensorInfo { name, shape })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// One-line model summary.
    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "backbone depth={} width={} heads={} skips={} params={}",
            c.depth,
            c.width,
            c.heads,
            c.skip_connections,
            self.param_count()
        )
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let mut out = Backbone::<U>::new(self.config.clone(), 0).expect("config already validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::of(s.f64());
            }
        }
        out
    }
}

impl<T: Scalar> Predictor<T> for Backbone<T> {
    fn predict(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: Condition<'_, T>,
        t: usize,
    ) -> Result<Velocity<T>> {
        self.forward(x_t, x_m, cond, t)
    }
}

#[cfg(test)]
mod tests;
