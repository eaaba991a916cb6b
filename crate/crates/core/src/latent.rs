//! Latent frame sequences and velocity fields.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{DType, Scalar};

/// Latent frames per second.
pub const FRAME_RATE: f64 = 50.0;
/// Latent channels produced by every codec.
pub const LATENT_CHANNELS: usize = 128;

/// `N × C` latent sequence (clean target, noisy state or mixture latent).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T> {
    data: Matrix<T>,
}

impl<T: Scalar> LatentSequence<T> {
    /// Checked constructor: at least one frame and only finite entries.
    pub fn new(data: Matrix<T>) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::param(format!("latent must be non-empty, got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(Error::Numeric("latent contains non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_matrix_unchecked(data: Matrix<T>) -> Self {
        Self { data }
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        Self {
            data: Matrix::zeros(frames, channels),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / FRAME_RATE
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> LatentSequence<U> {
        LatentSequence {
            data: self.data.cast(),
        }
    }

    /// Writes a versioned binary dump: magic, version, dtype, `N`, `C`,
    /// frame rate, then little-endian entries in row-major order.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.data.data().len() * T::DTYPE.size());
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        buf.push(match T::DTYPE {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        buf.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        buf.extend_from_slice(&FRAME_RATE.to_le_bytes());
        for &v in self.data.data() {
            v.write_le(&mut buf);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Format {
            what: "latent dump",
            detail: detail.to_string(),
        };
        if bytes.len() < 29 || &bytes[..8] != DUMP_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != DUMP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = match bytes[12] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(bad(&format!("unknown dtype tag {other}"))),
        };
        let n = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        let rate = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
        if rate != FRAME_RATE {
            return Err(bad(&format!("frame rate {rate} != {FRAME_RATE}")));
        }
        let payload = &bytes[29..];
        if payload.len() != n * c * dtype.size() {
            return Err(bad("payload size does not match header"));
        }
        let data: Vec<T> = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => payload.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Self::new(Matrix::from_vec(n, c, data))
    }
}

const DUMP_MAGIC: &[u8; 8] = b"TSELATNT";
const DUMP_VERSION: u32 = 1;

/// Velocity field `v = sqrt(abar) * eps - sqrt(1 - abar) * x0` with the same
/// shape as the latent it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity<T> {
    data: Matrix<T>,
}

impl<T: Scalar> Velocity<T> {
    pub fn new(data: Matrix<T>) -> Self {
        Self { data }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.data
    }
}
