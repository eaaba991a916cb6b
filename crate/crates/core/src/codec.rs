//! Waveform <-> latent codecs.
//!
//! [`DefaultCodec`] is a training-free orthogonal lapped transform (MDCT with
//! a sine window, hop 480 at 24 kHz) that keeps the 128 lowest bands, i.e.
//! the 0-3.2 kHz analysis band, one latent frame per hop. The transform is
//! applied circularly over the zero-padded clip so every frame, including the
//! first and last, is perfectly reconstructed for in-band content.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{Audio, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::latent::{LatentSequence, FRAME_RATE, LATENT_CHANNELS};
use crate::matrix::{gemm, Matrix, Op};
use crate::scalar::Scalar;

/// Samples per latent frame at 24 kHz and 50 Hz.
pub const HOP: usize = 480;

/// Number of latent frames covering `samples` audio samples.
pub fn frames_for(samples: usize) -> usize {
    samples.div_ceil(HOP)
}

/// Maps mono 24 kHz audio to and from `N × 128` latents at 50 Hz.
pub trait CodecPlugin<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    fn frame_rate(&self) -> f64 {
        FRAME_RATE
    }

    fn channels(&self) -> usize {
        LATENT_CHANNELS
    }

    fn encode(&self, audio: &Audio) -> Result<LatentSequence<T>>;
    fn decode(&self, latent: &LatentSequence<T>) -> Result<Audio>;
}

/// Persisted per-channel latent scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecAsset {
    pub format_version: u32,
    pub channel_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DefaultCodec {
    /// `2·HOP × 128` windowed cosine basis.
    basis: Matrix<f64>,
    /// Latent = coefficient / scale.
    scale: Vec<f64>,
}

impl Default for DefaultCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl DefaultCodec {
    pub fn new() -> Self {
        let m = HOP as f64;
        let norm = (2.0 / m).sqrt();
        let basis = Matrix::from_fn(2 * HOP, LATENT_CHANNELS, |n, k| {
            let n = n as f64;
            let w = (PI * (n + 0.5) / (2.0 * m)).sin();
            norm * w * (PI / m * (n + 0.5 + m / 2.0) * (k as f64 + 0.5)).cos()
        });
        Self {
            basis,
            scale: vec![1.0; LATENT_CHANNELS],
        }
    }

    pub fn with_scale(scale: Vec<f64>) -> Result<Self> {
        if scale.len() != LATENT_CHANNELS || scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::param("channel scale must hold 128 positive finite values"));
        }
        Ok(Self { scale, ..Self::new() })
    }

    pub fn channel_scale(&self) -> &[f64] {
        &self.scale
    }

    /// Unscaled band coefficients, `frames × 128`.
    fn analyze(&self, samples: &[f32]) -> Matrix<f64> {
        let frames = frames_for(samples.len()).max(1);
        let len = frames * HOP;
        let at = |i: i64| -> f64 {
            let idx = i.rem_euclid(len as i64) as usize;
            samples.get(idx).map_or(0.0, |&s| s as f64)
        };
        let blocks = Matrix::from_fn(frames, 2 * HOP, |j, n| at((j * HOP) as i64 - (HOP / 2) as i64 + n as i64));
        let mut coeffs = Matrix::zeros(frames, LATENT_CHANNELS);
        gemm(1.0, &blocks, Op::N, &self.basis, Op::N, 0.0, &mut coeffs);
        coeffs
    }

    fn synthesize(&self, coeffs: &Matrix<f64>) -> Vec<f32> {
        let frames = coeffs.rows();
        let len = frames * HOP;
        let mut blocks = Matrix::zeros(frames, 2 * HOP);
        gemm(1.0, coeffs, Op::N, &self.basis, Op::T, 0.0, &mut blocks);
        let mut out = vec![0.0f64; len];
        for j in 0..frames {
            for (n, v) in blocks.row(j).iter().enumerate() {
                let idx = ((j * HOP) as i64 - (HOP / 2) as i64 + n as i64).rem_euclid(len as i64) as usize;
                out[idx] += v;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Sets each channel's scale to its standard deviation over `clips`,
    /// floored at a tenth of the RMS standard deviation across channels.
    pub fn calibrate<'a>(&mut self, clips: impl IntoIterator<Item = &'a [f32]>) -> Result<()> {
        let mut sum_sq = vec![0.0; LATENT_CHANNELS];
        let mut count = 0usize;
        for clip in clips {
            let c = self.analyze(clip);
            for r in 0..c.rows() {
                for (s, v) in sum_sq.iter_mut().zip(c.row(r)) {
                    *s += v * v;
                }
            }
            count += c.rows();
        }
        if count == 0 {
            return Err(Error::Input("codec calibration needs at least one clip".into()));
        }
        let std: Vec<f64> = sum_sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        let overall = (std.iter().map(|s| s * s).sum::<f64>() / LATENT_CHANNELS as f64).sqrt();
        if overall <= 0.0 {
            return Err(Error::Input("codec calibration clips are silent".into()));
        }
        self.scale = std.iter().map(|s| s.max(0.1 * overall)).collect();
        Ok(())
    }

    pub fn asset(&self) -> CodecAsset {
        CodecAsset {
            format_version: 1,
            channel_scale: self.scale.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.asset())?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let asset: CodecAsset = serde_json::from_str(&text)?;
        if asset.format_version != 1 {
            return Err(Error::Format {
                what: "codec asset",
                detail: format!("unsupported version {}", asset.format_version),
            });
        }
        Self::with_scale(asset.channel_scale)
    }
}

impl<T: Scalar> CodecPlugin<T> for DefaultCodec {
    fn name(&self) -> &str {
        "mdct-default"
    }

    fn encode(&self, audio: &Audio) -> Result<LatentSequence<T>> {
        if audio.sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "codec expects {SAMPLE_RATE} Hz audio, got {} Hz",
                audio.sample_rate
            )));
        }
        if audio.is_empty() {
            return Err(Error::Input("cannot encode empty audio".into()));
        }
        if audio.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("audio contains non-finite samples".into()));
        }
        let coeffs = self.analyze(&audio.samples);
        let latent = Matrix::from_fn(coeffs.rows(), LATENT_CHANNELS, |r, c| T::of(coeffs.get(r, c) / self.scale[c]));
        LatentSequence::new(latent)
    }

    fn decode(&self, latent: &LatentSequence<T>) -> Result<Audio> {
        if latent.channels() != LATENT_CHANNELS {
            return Err(Error::param(format!(
                "codec expects {LATENT_CHANNELS} latent channels, got {}",
                latent.channels()
            )));
        }
        let m = latent.matrix();
        let coeffs = Matrix::from_fn(m.rows(), LATENT_CHANNELS, |r, c| m.get(r, c).f64() * self.scale[c]);
        Ok(Audio::new(self.synthesize(&coeffs), SAMPLE_RATE))
    }
}

/// Reconstruction SNR in dB; `inf` when the error is exactly zero.
pub fn reconstruction_snr_db(reference: &[f32], estimate: &[f32]) -> f64 {
    let signal: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
    let noise: f64 = reference
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - estimate.get(i).copied().unwrap_or(0.0) as f64).powi(2))
        .sum();
    if noise == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (signal / noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two partials below 3 kHz with 20 ms raised-cosine fades.
    fn toy_signal(secs: f64, f1: f64, f2: f64) -> Audio {
        let n = (SAMPLE_RATE as f64 * secs) as usize;
        let fade = 480.0;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                let edge = (i as f64).min((n - 1 - i) as f64);
                let env = if edge < fade { 0.5 - 0.5 * (PI * edge / fade).cos() } else { 1.0 };
                (env * (0.4 * (2.0 * PI * f1 * t).sin() + 0.2 * (2.0 * PI * f2 * t + 0.3).sin())) as f32
            })
            .collect();
        Audio::new(samples, SAMPLE_RATE)
    }

    #[test]
    fn frame_arithmetic() {
        assert_eq!(frames_for(240_000), 500);
        assert_eq!(frames_for(480), 1);
        assert_eq!(frames_for(481), 2);
        let codec = DefaultCodec::new();
        let lat: LatentSequence<f64> = codec.encode(&Audio::silence(240_000, SAMPLE_RATE)).unwrap();
        assert_eq!(lat.shape(), (500, 128));
        let back = CodecPlugin::<f64>::decode(&codec, &lat).unwrap();
        assert_eq!(back.len(), 240_000);
        assert!((back.duration_secs() - 10.0).abs() < 1.0 / 50.0);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn in_band_roundtrip_exceeds_40_db() {
        let codec = DefaultCodec::new();
        for (f1, f2) in [(220.0, 1330.0), (97.0, 2400.0), (1000.0, 2875.5)] {
            let x = toy_signal(1.0, f1, f2);
            let lat: LatentSequence<f64> = codec.encode(&x).unwrap();
            let y = codec.decode(&lat).unwrap();
            let snr = reconstruction_snr_db(&x.samples, &y.samples);
            assert!(snr >= 40.0, "{f1}/{f2}: {snr} dB");
        }
    }

    #[test]
    fn out_of_band_content_is_removed() {
        let codec = DefaultCodec::new();
        let x = toy_signal(0.5, 6000.0, 7000.0);
        let lat: LatentSequence<f64> = codec.encode(&x).unwrap();
        let y = codec.decode(&lat).unwrap();
        assert!(crate::audio::rms(&y.samples) < 0.01 * x.rms());
    }

    #[test]
    fn decode_is_linear() {
        let codec = DefaultCodec::new();
        let lat: LatentSequence<f64> = codec.encode(&toy_signal(0.3, 440.0, 900.0)).unwrap();
        let scaled = LatentSequence::new(lat.matrix().map(|v| -1.7 * v)).unwrap();
        let a = codec.decode(&lat).unwrap();
        let b = codec.decode(&scaled).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| ((-1.7 * x) - y).abs() < 1e-6));
    }

    #[test]
    fn calibrated_scaling_is_invertible() {
        let mut codec = DefaultCodec::new();
        let clips: Vec<Audio> = (0..3).map(|i| toy_signal(0.5, 300.0 + 200.0 * i as f64, 1500.0)).collect();
        codec.calibrate(clips.iter().map(|a| a.samples.as_slice())).unwrap();
        let lat: LatentSequence<f32> = codec.encode(&clips[1]).unwrap();
        let y = codec.decode(&lat).unwrap();
        assert!(reconstruction_snr_db(&clips[1].samples, &y.samples) > 40.0);
    }

    #[test]
    fn rejects_wrong_rate_and_channels() {
        let codec = DefaultCodec::new();
        let r: Result<LatentSequence<f32>> = codec.encode(&Audio::silence(100, 16_000));
        assert!(matches!(r, Err(Error::Input(_))));
        let bad = LatentSequence::<f32>::zeros(3, 64);
        assert!(matches!(codec.decode(&bad), Err(Error::Parameter(_))));
    }
}
