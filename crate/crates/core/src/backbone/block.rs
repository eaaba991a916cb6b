//! Transformer block with adaptive layer-norm modulation.

use rand::Rng;

use super::attention::{Attention, AttentionCache, RopeTable};
use super::layers::{
    gated_residual, gated_residual_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, modulate,
    modulate_backward, Linear,
};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Shift, scale and gate vectors for the attention and MLP branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation<T> {
    pub shift_attn: Vec<T>,
    pub scale_attn: Vec<T>,
    pub gate_attn: Vec<T>,
    pub shift_mlp: Vec<T>,
    pub scale_mlp: Vec<T>,
    pub gate_mlp: Vec<T>,
}

impl<T: Scalar> Modulation<T> {
    fn split(v: &[T], width: usize) -> Self {
        let part = |i: usize| v[i * width..(i + 1) * width].to_vec();
        Self {
            shift_attn: part(0),
            scale_attn: part(1),
            gate_attn: part(2),
            shift_mlp: part(3),
            scale_mlp: part(4),
            gate_mlp: part(5),
        }
    }

    fn concat(&self) -> Vec<T> {
        [
            &self.shift_attn,
            &self.scale_attn,
            &self.gate_attn,
            &self.shift_mlp,
            &self.scale_mlp,
            &self.gate_mlp,
        ]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitBlock<T> {
    /// Merges `[h | skip]` back to the model width when this block
    /// receives a long skip connection.
    pub skip: Option<Linear<T>>,
    pub ada: Linear<T>,
    pub attn: Attention<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug)]
pub struct BlockCache<T> {
    merged_input: Option<Matrix<T>>,
    cond: Matrix<T>,
    modulation: Modulation<T>,
    xhat1: Matrix<T>,
    rstd1: Vec<T>,
    attn: AttentionCache<T>,
    attn_out: Matrix<T>,
    xhat2: Matrix<T>,
    rstd2: Vec<T>,
    m2: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
    mlp_out: Matrix<T>,
}

impl<T: Scalar> DitBlock<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, mlp_ratio: usize, skip: bool, rng: &mut R) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            skip: skip.then(|| {
                let mut lin = Linear::zeros(2 * width, width);
                let half = T::of(0.5);
                for i in 0..width {
                    lin.weight.set(i, i, half);
                    lin.weight.set(width + i, i, half);
                }
                lin
            }),
            ada: Linear::zeros(width, 6 * width),
            attn: Attention {
                qkv: Linear::xavier(width, 3 * width, rng),
                proj: Linear::xavier(width, width, rng),
                heads,
            },
            fc1: Linear::xavier(width, hidden, rng),
            fc2: Linear::xavier(hidden, width, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.inputs(), l.outputs());
        Self {
            skip: self.skip.as_ref().map(z),
            ada: z(&self.ada),
            attn: Attention {
                qkv: z(&self.attn.qkv),
                proj: z(&self.attn.proj),
                heads: self.attn.heads,
            },
            fc1: z(&self.fc1),
            fc2: z(&self.fc2),
        }
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    /// Modulation vectors for an activated condition row (`1 × W`).
    pub fn modulation(&self, cond: &Matrix<T>) -> Modulation<T> {
        Modulation::split(self.ada.forward(cond).row(0), self.width())
    }

    pub fn forward(
        &self,
        h: &Matrix<T>,
        skip: Option<&Matrix<T>>,
        cond: &Matrix<T>,
        rope: &RopeTable<T>,
    ) -> (Matrix<T>, BlockCache<T>) {
        let (h, merged_input) = match (&self.skip, skip) {
            (Some(lin), Some(s)) => {
                let cat = h.hconcat(s);
                (lin.forward(&cat), Some(cat))
            }
            _ => (h.clone(), None),
        };
        let m = self.modulation(cond);
        let (xhat1, rstd1) = layer_norm(&h);
        let m1 = modulate(&xhat1, &m.shift_attn, &m.scale_attn);
        let (attn_out, attn) = self.attn.forward(&m1, rope);
        let h2 = gated_residual(&h, &m.gate_attn, &attn_out);
        let (xhat2, rstd2) = layer_norm(&h2);
        let m2 = modulate(&xhat2, &m.shift_mlp, &m.scale_mlp);
        let pre_act = self.fc1.forward(&m2);
        let act = pre_act.map(gelu);
        let mlp_out = self.fc2.forward(&act);
        let out = gated_residual(&h2, &m.gate_mlp, &mlp_out);
        let cache = BlockCache {
            merged_input,
            cond: cond.clone(),
            modulation: m,
            xhat1,
            rstd1,
            attn,
            attn_out,
            xhat2,
            rstd2,
            m2,
            pre_act,
            act,
            mlp_out,
        };
        (out, cache)
    }

    /// Returns `(dh, dskip, dcond)`.
    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dout: &Matrix<T>,
        rope: &RopeTable<T>,
        grad: &mut DitBlock<T>,
    ) -> (Matrix<T>, Option<Matrix<T>>, Matrix<T>) {
        let m = &cache.modulation;
        // MLP branch
        let (dmlp, dgate_mlp) = gated_residual_backward(&m.gate_mlp, &cache.mlp_out, dout);
        let dact = self.fc2.backward(&cache.act, &dmlp, &mut grad.fc2);
        let dpre = dact.zip_map(&cache.pre_act, |d, x| d * gelu_grad(x));
        let dm2 = self.fc1.backward(&cache.m2, &dpre, &mut grad.fc1);
        let (dxhat2, dshift_mlp, dscale_mlp) = modulate_backward(&cache.xhat2, &m.scale_mlp, &dm2);
        let mut dh2 = layer_norm_backward(&cache.xhat2, &cache.rstd2, &dxhat2);
        dh2.add_assign(dout);
        // attention branch
        let (dattn, dgate_attn) = gated_residual_backward(&m.gate_attn, &cache.attn_out, &dh2);
        let dm1 = self.attn.backward(&cache.attn, &dattn, rope, &mut grad.attn);
        let (dxhat1, dshift_attn, dscale_attn) = modulate_backward(&cache.xhat1, &m.scale_attn, &dm1);
        let mut dh = layer_norm_backward(&cache.xhat1, &cache.rstd1, &dxhat1);
        dh.add_assign(&dh2);
        let dmod = Modulation {
            shift_attn: dshift_attn,
            scale_attn: dscale_attn,
            gate_attn: dgate_attn,
            shift_mlp: dshift_mlp,
            scale_mlp: dscale_mlp,
            gate_mlp: dgate_mlp,
        };
        let dcond = self.ada.backward(&cache.cond, &Matrix::row_vector(dmod.concat()), &mut grad.ada);
        match (&self.skip, &cache.merged_input, grad.skip.as_mut()) {
            (Some(lin), Some(cat), Some(g)) => {
                let dcat = lin.backward(cat, &dh, g);
                let (dh, ds) = dcat.split_cols(self.width());
                (dh, Some(ds), dcond)
            }
            _ => (dh, None, dcond),
        }
    }

    /// Linear layers in a fixed order, paired with their names.
    pub(crate) fn linears(&self) -> Vec<(&'static str, &Linear<T>)> {
        let mut out = Vec::with_capacity(6);
        if let Some(s) = &self.skip {
            out.push(("skip", s));
        }
        out.extend([
            ("ada", &self.ada),
            ("attn.qkv", &self.attn.qkv),
            ("attn.proj", &self.attn.proj),
            ("mlp.fc1", &self.fc1),
            ("mlp.fc2", &self.fc2),
        ]);
        out
    }

    pub(crate) fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear<T>)> {
        let mut out = Vec::with_capacity(6);
        if let Some(s) = &mut self.skip {
            out.push(("skip", s));
        }
        out.extend([
            ("ada", &mut self.ada),
            ("attn.qkv", &mut self.attn.qkv),
            ("attn.proj", &mut self.attn.proj),
            ("mlp.fc1", &mut self.fc1),
            ("mlp.fc2", &mut self.fc2),
        ]);
        out
    }
}
