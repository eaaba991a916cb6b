//! Log-mel statistics used by the default embedder and the toy classifier.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Dynamic range kept below the clip's loudest mel cell, in dB.
    pub floor_db: f64,
    pub rolloff: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::audio::SAMPLE_RATE,
            n_fft: 1024,
            hop: 480,
            n_mels: 40,
            fmin: 40.0,
            fmax: 3200.0,
            floor_db: 60.0,
            rolloff: 0.85,
        }
    }
}

/// Per-band log-mel mean and standard deviation, followed by energy-weighted
/// mean and standard deviation of the spectral centroid and roll-off
/// trajectories and their slopes over time. Input is normalized to unit RMS first, so the features do
/// not depend on gain.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `(first_bin, weights)` per mel band.
    mel: Vec<(usize, Vec<f64>)>,
    max_bin: usize,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("cfg", &self.cfg).finish()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let window = (0..cfg.n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.n_fft as f64).cos())
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let (m_lo, m_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mel = (0..cfg.n_mels)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let first = (lo / bin_hz).floor() as usize;
                let last = (hi / bin_hz).ceil() as usize;
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        let max_bin = ((cfg.fmax / bin_hz).floor() as usize).min(cfg.n_fft / 2);
        Self {
            cfg,
            fft,
            window,
            mel,
            max_bin,
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        2 * self.cfg.n_mels + 6
    }

    /// Power spectra of centred, Hann-windowed frames (bins `0..=n_fft/2`).
    fn power_frames(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_fft = self.cfg.n_fft;
        let pad = n_fft / 2;
        let frames = 1 + x.len() / self.cfg.hop;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        (0..frames)
            .map(|f| {
                let start = (f * self.cfg.hop) as i64 - pad as i64;
                for (i, b) in buf.iter_mut().enumerate() {
                    let idx = start + i as i64;
                    let s = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
                    *b = Complex::new(s * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect()
    }

    pub fn extract(&self, samples: &[f32]) -> Vec<f64> {
        let rms = crate::audio::rms(samples);
        let x: Vec<f64> = if rms > 0.0 {
            samples.iter().map(|&s| s as f64 / rms).collect()
        } else {
            samples.iter().map(|&s| s as f64).collect()
        };
        let spectra = self.power_frames(&x);

        let mel: Vec<Vec<f64>> = spectra
            .iter()
            .map(|p| {
                self.mel
                    .iter()
                    .map(|(first, w)| w.iter().enumerate().map(|(i, wi)| wi * p.get(first + i).copied().unwrap_or(0.0)).sum())
                    .collect()
            })
            .collect();
        let peak = mel.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        let floor = if peak > 0.0 { peak * 10f64.powf(-self.cfg.floor_db / 10.0) } else { 1e-30 };

        // Frames are weighted by their mel energy so near-silent stretches
        // barely move the statistics.
        let frame_energy: Vec<f64> = mel.iter().map(|m| m.iter().sum::<f64>() + floor).collect();
        let mut out = Vec::with_capacity(self.dim());
        let mut stds = Vec::with_capacity(self.cfg.n_mels);
        for b in 0..self.cfg.n_mels {
            let vals: Vec<f64> = mel.iter().map(|m| m[b].max(floor).ln()).collect();
            let (mean, std) = weighted_stats(&vals, &frame_energy);
            out.push(mean);
            stds.push(std);
        }
        out.extend(stds);

        let bin_hz = self.cfg.sample_rate as f64 / self.cfg.n_fft as f64;
        let mut centroid = Vec::new();
        let mut rolloff = Vec::new();
        let mut weight = Vec::new();
        let mut times = Vec::new();
        for (f, p) in spectra.iter().enumerate() {
            let band = &p[..=self.max_bin];
            let energy: f64 = band.iter().sum();
            if energy <= 0.0 {
                continue;
            }
            let c = band.iter().enumerate().map(|(k, v)| k as f64 * bin_hz * v).sum::<f64>() / energy;
            let mut acc = 0.0;
            let mut r = self.max_bin;
            for (k, v) in band.iter().enumerate() {
                acc += v;
                if acc >= self.cfg.rolloff * energy {
                    r = k;
                    break;
                }
            }
            centroid.push(c / self.cfg.fmax);
            rolloff.push(r as f64 * bin_hz / self.cfg.fmax);
            weight.push(energy);
            times.push(f as f64 * self.cfg.hop as f64 / self.cfg.sample_rate as f64);
        }
        for traj in [&centroid, &rolloff] {
            let (m, s) = weighted_stats(traj, &weight);
            out.push(m);
            out.push(s);
        }
        for traj in [&centroid, &rolloff] {
            out.push(weighted_slope(&times, traj, &weight));
        }
        out
    }
}

fn weighted_stats(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    (mean, var.sqrt())
}

/// Weighted least-squares slope of `y` against `x` (per second).
fn weighted_slope(x: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let (mx, _) = weighted_stats(x, w);
    let (my, _) = weighted_stats(y, w);
    let sxx: f64 = x.iter().zip(w).map(|(a, wi)| wi * (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return 0.0;
    }
    x.iter().zip(y).zip(w).map(|((a, b), wi)| wi * (a - mx) * (b - my)).sum::<f64>() / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> Vec<f32> {
        let n = (24_000.0 * secs) as usize;
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / 24_000.0).sin() as f32).collect()
    }

    #[test]
    fn centroid_tracks_tone_frequency() {
        let fx = FeatureExtractor::new(FeatureConfig::default());
        let lo = fx.extract(&tone(300.0, 1.0));
        let hi = fx.extract(&tone(2000.0, 1.0));
        let c = 2 * 40;
        assert_eq!(lo.len(), fx.dim());
        assert!((lo[c] * 3200.0 - 300.0).abs() < 40.0, "{}", lo[c] * 3200.0);
        assert!((hi[c] * 3200.0 - 2000.0).abs() < 40.0);
    }

    #[test]
    fn slope_separates_sweep_direction() {
        let fx = FeatureExtractor::new(FeatureConfig::default());
        let sweep = |f0: f64, f1: f64| -> Vec<f32> {
            let n = 24_000;
            (0..n)
                .map(|i| {
                    let t = i as f64 / 24_000.0;
                    (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t)).sin() as f32
                })
                .collect()
        };
        let up = fx.extract(&sweep(400.0, 2400.0));
        let down = fx.extract(&sweep(2400.0, 400.0));
        let slope = 2 * 40 + 4;
        // centroid rises by about 2000 Hz per second
        assert!((up[slope] * 3200.0 - 2000.0).abs() < 200.0, "{}", up[slope] * 3200.0);
        assert!((down[slope] * 3200.0 + 2000.0).abs() < 200.0);
    }

    #[test]
    fn gain_invariant_bitwise() {
        let fx = FeatureExtractor::new(FeatureConfig::default());
        let x = tone(700.0, 0.5);
        let half: Vec<f32> = x.iter().map(|v| v * 0.5).collect();
        assert_eq!(fx.extract(&x), fx.extract(&half));
    }
}
