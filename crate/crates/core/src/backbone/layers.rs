//! Layers with explicit backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::matrix::{gemm, Matrix, Op};
use crate::scalar::Scalar;

/// Affine map `y = x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![T::zero(); outputs],
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        Self {
            weight: Matrix::from_fn(inputs, outputs, |_, _| T::of(dist.sample(rng))),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn normal<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Matrix::from_fn(inputs, outputs, |_, _| T::of(dist.sample(rng))),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = Matrix::zeros(x.rows(), self.outputs());
        for r in 0..y.rows() {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(T::one(), x, Op::N, &self.weight, Op::N, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) -> Matrix<T> {
        self.accumulate(x, dy, grad);
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        gemm(T::one(), dy, Op::N, &self.weight, Op::T, T::zero(), &mut dx);
        dx
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) {
        gemm(T::one(), x, Op::T, dy, Op::N, T::one(), &mut grad.weight);
        for r in 0..dy.rows() {
            for (g, &d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Parameter-free layer norm over each row; returns `(x_hat, 1/std)`.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let n = T::of(x.cols() as f64);
    let eps = T::of(LN_EPS);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (out, rstd)
}

pub fn layer_norm_backward<T: Scalar>(xhat: &Matrix<T>, rstd: &[T], dxhat: &Matrix<T>) -> Matrix<T> {
    let n = T::of(xhat.cols() as f64);
    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
    for r in 0..xhat.rows() {
        let (xr, dr) = (xhat.row(r), dxhat.row(r));
        let mean_d = dr.iter().copied().sum::<T>() / n;
        let mean_dx = dr.iter().zip(xr).map(|(&d, &x)| d * x).sum::<T>() / n;
        for ((o, &d), &x) in dx.row_mut(r).iter_mut().zip(dr).zip(xr) {
            *o = rstd[r] * (d - mean_d - x * mean_dx);
        }
    }
    dx
}

/// `x_hat * (1 + scale) + shift`, broadcasting row vectors.
pub fn modulate<T: Scalar>(xhat: &Matrix<T>, shift: &[T], scale: &[T]) -> Matrix<T> {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, &sh), &sc) in out.row_mut(r).iter_mut().zip(shift).zip(scale) {
            *o = *o * (T::one() + sc) + sh;
        }
    }
    out
}

/// Backward of [`modulate`]: returns `(d x_hat, d shift, d scale)`.
pub fn modulate_backward<T: Scalar>(xhat: &Matrix<T>, scale: &[T], dy: &Matrix<T>) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let mut dx = dy.clone();
    let mut dshift = vec![T::zero(); scale.len()];
    let mut dscale = vec![T::zero(); scale.len()];
    for r in 0..dy.rows() {
        for (c, (o, &d)) in dx.row_mut(r).iter_mut().zip(dy.row(r)).enumerate() {
            *o = d * (T::one() + scale[c]);
            dshift[c] += d;
            dscale[c] += d * xhat.get(r, c);
        }
    }
    (dx, dshift, dscale)
}

/// `h + gate ⊙ s` with a broadcast row gate.
pub fn gated_residual<T: Scalar>(h: &Matrix<T>, gate: &[T], s: &Matrix<T>) -> Matrix<T> {
    let mut out = h.clone();
    for r in 0..out.rows() {
        for ((o, &g), &v) in out.row_mut(r).iter_mut().zip(gate).zip(s.row(r)) {
            *o += g * v;
        }
    }
    out
}

/// Backward of [`gated_residual`] w.r.t. `s` and `gate` (the residual
/// gradient passes through unchanged).
pub fn gated_residual_backward<T: Scalar>(gate: &[T], s: &Matrix<T>, dy: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut ds = dy.clone();
    let mut dgate = vec![T::zero(); gate.len()];
    for r in 0..dy.rows() {
        for (c, (o, &d)) in ds.row_mut(r).iter_mut().zip(dy.row(r)).enumerate() {
            *o = d * gate[c];
            dgate[c] += d * s.get(r, c);
        }
    }
    (ds, dgate)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x * sigmoid(2u)` since
/// `(1 + tanh u) / 2 = sigmoid(2u)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, k) = (T::of(2.0 * GELU_C), T::of(GELU_K));
    x * sigmoid(c * (x + k * x * x * x))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = (T::of(2.0 * GELU_C), T::of(GELU_K));
    let s = sigmoid(c * (x + k * x * x * x));
    s + x * s * (T::one() - s) * c * (T::one() + T::of(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8);
            assert!((silu_grad(x) - fd(silu, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for x in [-8.0, -3.0, -0.7, -1e-4, 0.0, 0.4, 2.5, 9.0] {
            let tanh_form = 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh());
            assert!((gelu(x) - tanh_form).abs() < 1e-12, "{x}");
        }
        assert_eq!(gelu(-100.0f32), 0.0);
        assert_eq!(gelu(100.0f32), 100.0);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Linear::<f64>::normal(3, 6, 1.0, &mut rng).weight;
        let w = Linear::<f64>::normal(3, 6, 1.0, &mut rng).weight;
        let loss = |x: &Matrix<f64>| layer_norm(x).0.zip_map(&w, |a, b| a * b).data().iter().sum::<f64>();
        let (xhat, rstd) = layer_norm(&x);
        let dx = layer_norm_backward(&xhat, &rstd, &w);
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (loss(&p) - loss(&m)) / 2e-6;
            assert!((num - dx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::<f64>::xavier(4, 3, &mut rng);
        let x = Linear::<f64>::normal(5, 4, 1.0, &mut rng).weight;
        let dy = Linear::<f64>::normal(5, 3, 1.0, &mut rng).weight;
        let mut g = Linear::zeros(4, 3);
        let dx = lin.backward(&x, &dy, &mut g);
        let loss = |l: &Linear<f64>, x: &Matrix<f64>| l.forward(x).zip_map(&dy, |a, b| a * b).data().iter().sum::<f64>();
        let mut p = lin.clone();
        p.weight.data_mut()[5] += 1e-6;
        assert!(((loss(&p, &x) - loss(&lin, &x)) / 1e-6 - g.weight.data()[5]).abs() < 1e-5);
        let mut xp = x.clone();
        xp.data_mut()[7] += 1e-6;
        assert!(((loss(&lin, &xp) - loss(&lin, &x)) / 1e-6 - dx.data()[7]).abs() < 1e-5);
        assert!((g.bias[1] - dy.col_sums()[1]).abs() < 1e-12);
    }
}
