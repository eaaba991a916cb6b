//! Multi-head self-attention with rotary position embeddings.

use super::layers::Linear;
use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix, Op};
use crate::scalar::Scalar;

/// Precomputed rotation angles for a set of positions.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    cos: Matrix<T>,
    sin: Matrix<T>,
}

impl<T: Scalar> RopeTable<T> {
    /// Pair `i` of a `head_dim` vector at position `p` rotates by
    /// `p * base^(-2i / head_dim)`.
    pub fn new(positions: &[usize], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::Configuration(format!("RoPE needs an even head dimension, got {head_dim}")));
        }
        let half = head_dim / 2;
        let freq: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
        let angle = |r: usize, c: usize| positions[r] as f64 * freq[c];
        Ok(Self {
            cos: Matrix::from_fn(positions.len(), half, |r, c| T::of(angle(r, c).cos())),
            sin: Matrix::from_fn(positions.len(), half, |r, c| T::of(angle(r, c).sin())),
        })
    }

    pub fn positions(&self) -> usize {
        self.cos.rows()
    }

    /// Rotates rows of `x` (`N × head_dim`) in place; `inverse` applies the
    /// transpose rotation (used for gradients).
    pub fn apply(&self, x: &mut Matrix<T>, inverse: bool) {
        let half = self.cos.cols();
        for r in 0..x.rows() {
            let (cos, sin) = (self.cos.row(r), self.sin.row(r));
            let row = x.row_mut(r);
            for i in 0..half {
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                let s = if inverse { -sin[i] } else { sin[i] };
                row[2 * i] = a * cos[i] - b * s;
                row[2 * i + 1] = a * s + b * cos[i];
            }
        }
    }
}

/// Rotary embedding of one head's queries or keys (`N × head_dim`).
pub fn rope_rotate<T: Scalar>(x: &Matrix<T>, positions: &[usize], base: f64) -> Result<Matrix<T>> {
    if positions.len() != x.rows() {
        return Err(Error::param(format!("{} positions for {} rows", positions.len(), x.rows())));
    }
    let table = RopeTable::new(positions, x.cols(), base)?;
    let mut out = x.clone();
    table.apply(&mut out, false);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

#[derive(Debug)]
pub struct AttentionCache<T> {
    input: Matrix<T>,
    /// Rotated queries, rotated keys and values per head.
    q: Vec<Matrix<T>>,
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    probs: Vec<Matrix<T>>,
    merged: Matrix<T>,
}

fn take_cols<T: Scalar>(m: &Matrix<T>, start: usize, width: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn put_cols<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, start: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + src.cols()].copy_from_slice(src.row(r));
    }
}

impl<T: Scalar> Attention<T> {
    pub fn width(&self) -> usize {
        self.proj.outputs()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(&self, x: &Matrix<T>, rope: &RopeTable<T>) -> (Matrix<T>, AttentionCache<T>) {
        let (n, w, d) = (x.rows(), self.width(), self.head_dim());
        let qkv = self.qkv.forward(x);
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut merged = Matrix::zeros(n, w);
        let mut cache = AttentionCache {
            input: x.clone(),
            q: Vec::with_capacity(self.heads),
            k: Vec::with_capacity(self.heads),
            v: Vec::with_capacity(self.heads),
            probs: Vec::with_capacity(self.heads),
            merged: Matrix::zeros(0, 0),
        };
        for h in 0..self.heads {
            let mut q = take_cols(&qkv, h * d, d);
            let mut k = take_cols(&qkv, w + h * d, d);
            let v = take_cols(&qkv, 2 * w + h * d, d);
            rope.apply(&mut q, false);
            rope.apply(&mut k, false);
            let mut scores = Matrix::zeros(n, n);
            gemm(scale, &q, Op::N, &k, Op::T, T::zero(), &mut scores);
            for r in 0..n {
                let row = scores.row_mut(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            let mut out = Matrix::zeros(n, d);
            gemm(T::one(), &scores, Op::N, &v, Op::N, T::zero(), &mut out);
            put_cols(&mut merged, &out, h * d);
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.probs.push(scores);
        }
        let y = self.proj.forward(&merged);
        cache.merged = merged;
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Matrix<T>,
        rope: &RopeTable<T>,
        grad: &mut Attention<T>,
    ) -> Matrix<T> {
        let (n, w, d) = (dy.rows(), self.width(), self.head_dim());
        let scale = T::of(1.0 / (d as f64).sqrt());
        let dmerged = self.proj.backward(&cache.merged, dy, &mut grad.proj);
        let mut dqkv = Matrix::zeros(n, 3 * w);
        for h in 0..self.heads {
            let dout = take_cols(&dmerged, h * d, d);
            let p = &cache.probs[h];
            let mut dv = Matrix::zeros(n, d);
            gemm(T::one(), p, Op::T, &dout, Op::N, T::zero(), &mut dv);
            let mut dp = Matrix::zeros(n, n);
            gemm(T::one(), &dout, Op::N, &cache.v[h], Op::T, T::zero(), &mut dp);
            for r in 0..n {
                let pr = p.row(r);
                let dot = dp.row(r).iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                for (g, &pv) in dp.row_mut(r).iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            let mut dq = Matrix::zeros(n, d);
            gemm(scale, &dp, Op::N, &cache.k[h], Op::N, T::zero(), &mut dq);
            let mut dk = Matrix::zeros(n, d);
            gemm(scale, &dp, Op::T, &cache.q[h], Op::N, T::zero(), &mut dk);
            rope.apply(&mut dq, true);
            rope.apply(&mut dk, true);
            put_cols(&mut dqkv, &dq, h * d);
            put_cols(&mut dqkv, &dk, w + h * d);
            put_cols(&mut dqkv, &dv, 2 * w + h * d);
        }
        self.qkv.backward(&cache.input, &dqkv, &mut grad.qkv)
    }
}
