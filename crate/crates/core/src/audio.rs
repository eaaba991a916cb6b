//! Mono audio buffers, WAV I/O and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Working sample rate for the codec, the embedder and all simulated data.
pub const SAMPLE_RATE: u32 = 24_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Sample format used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

impl Audio {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Reads any PCM or float WAV and averages its channels to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<Result<_, _>>()
                    .map_err(wav_err)?
            }
        };
        let samples = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect();
        Ok(Self::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: &Path, format: WavFormat) -> Result<()> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let (bits, sample_format) = match format {
            WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
            WavFormat::Float32 => (32, hound::SampleFormat::Float),
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: bits,
            sample_format,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            match format {
                WavFormat::Pcm16 => {
                    let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
                    writer.write_sample(v).map_err(wav_err)?;
                }
                WavFormat::Float32 => writer.write_sample(s).map_err(wav_err)?,
            }
        }
        writer.finalize().map_err(wav_err)
    }

    /// Band-limited resampling to `target` Hz (no-op when rates match).
    pub fn resample(&self, target: u32) -> Self {
        if target == self.sample_rate {
            return self.clone();
        }
        Self::new(resample(&self.samples, self.sample_rate, target), target)
    }
}

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

/// Windowed-sinc interpolation with a Blackman window; the cutoff sits just
/// below the lower of the two Nyquist frequencies.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = ((input.len() as f64) * ratio).round() as usize;
    // Cutoff in cycles per input sample.
    let fc = 0.5 * ratio.min(1.0) * 0.94;
    let half = (12.0 / fc).ceil() as i64;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let centre = n as f64 / ratio;
        let k0 = (centre.floor() as i64 - half).max(0);
        let k1 = (centre.floor() as i64 + half).min(input.len() as i64 - 1);
        let mut acc = 0.0f64;
        for k in k0..=k1 {
            let d = centre - k as f64;
            let x = d / (half as f64 + 1.0);
            if x.abs() >= 1.0 {
                continue;
            }
            let w = 0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos();
            let arg = 2.0 * fc * d;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            acc += input[k as usize] as f64 * 2.0 * fc * sinc * w;
        }
        out.push(acc as f32);
    }
    out
}
