//! Parameterized building blocks recorded onto a [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[d_in, d_out], INIT_STD));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Same as [`Linear::new`] with the weight set to zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Two-layer perceptron `d_in -> hidden -> d_out`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = match self.act {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        self.fc2.forward(g, h)
    }
}

/// Scaled dot-product attention recorded on the graph.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = g.shape(q).last().copied().unwrap_or(1);
    let s = g.matmul_t(q, k)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let a = g.softmax_rows(s);
    g.matmul(a, v)
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// `queries` attend over `keys`, reading from `values`.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, values)?;
        let o = if self.heads == 1 {
            attend(g, q, k, v)?
        } else {
            let dh = self.q.d_out / self.heads;
            let mut parts = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                parts.push(attend(g, qh, kh, vh)?);
            }
            g.concat_cols(&parts)?
        };
        self.out.forward(g, o)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 2 * dim, dim, Activation::Gelu, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
