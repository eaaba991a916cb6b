use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::process::{cfg_combine, posterior_between, recover_x0};
use super::schedule::NoiseSchedule;
use crate::conditioning::ReferenceEmbedding;
use crate::error::{Error, Result};
use crate::latent::{LatentSequence, Velocity};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Default guidance scale for audio queries.
pub const AUDIO_GUIDANCE: f64 = 2.5;
/// Default guidance scale for text queries.
pub const TEXT_GUIDANCE: f64 = 3.0;

/// Conditioning passed to a velocity predictor.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a, T> {
    Reference(&'a ReferenceEmbedding<T>),
    /// The model's learned unconditional embedding.
    Null,
}

/// Anything that maps `(x_t, x_m, condition, t)` to a velocity.
pub trait Predictor<T: Scalar> {
    fn predict(
        &self,
        x_t: &LatentSequence<T>,
        x_m: &LatentSequence<T>,
        cond: Condition<'_, T>,
        t: usize,
    ) -> Result<Velocity<T>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: AUDIO_GUIDANCE,
            seed: 0,
        }
    }
}

/// Descending inference timesteps: a uniform stride over `[1, T]` that always
/// contains `T` and `1`.
pub fn inference_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::param(format!("inference steps must lie in [1, {total}], got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64;
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| 1 + (span * (last - i as f64) / last).round() as usize)
        .collect())
}

pub(crate) fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

/// Ancestral reverse sampling with classifier-free guidance.
///
/// Draw order is fixed: `x_T` first, then one latent-sized Gaussian per
/// non-final step, so outputs are a pure function of the seed, the model and
/// the inputs.
pub fn sample<T: Scalar, P: Predictor<T> + ?Sized>(
    predictor: &P,
    mixture: &LatentSequence<T>,
    reference: &ReferenceEmbedding<T>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<LatentSequence<T>> {
    if !schedule.is_rescaled() {
        return Err(Error::Configuration(
            "sampling requires a zero-terminal-SNR (rescaled) schedule".into(),
        ));
    }
    if !(cfg.guidance_scale >= 0.0) {
        return Err(Error::param(format!("guidance scale must be >= 0, got {}", cfg.guidance_scale)));
    }
    let timesteps = inference_timesteps(schedule.steps(), cfg.steps)?;
    let (n, c) = mixture.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = LatentSequence::from_matrix_unchecked(gaussian::<T>(&mut rng, n, c));
    let mut x0 = x.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let v_cond = predictor.predict(&x, mixture, Condition::Reference(reference), t)?;
        let v = if cfg.guidance_scale == 1.0 {
            v_cond
        } else {
            let v_uncond = predictor.predict(&x, mixture, Condition::Null, t)?;
            cfg_combine(&v_cond, &v_uncond, cfg.guidance_scale)?
        };
        x0 = recover_x0(&x, &v, t, schedule)?;
        if t_prev == 0 {
            break;
        }
        let post = posterior_between(&x, &x0, t, t_prev, schedule)?;
        let mut next = post.mean.into_matrix();
        let noise = gaussian::<T>(&mut rng, n, c);
        next.axpy(T::of(post.variance.sqrt()), &noise);
        x = LatentSequence::from_matrix_unchecked(next);
    }
    if !x0.matrix().all_finite() {
        return Err(Error::Numeric("sampler produced non-finite latents".into()));
    }
    Ok(x0)
}
