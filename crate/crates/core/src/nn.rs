//! Layers shared by the encoders and the decoder.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform, xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Linear layer whose weight starts at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Accepts a vector `[in]` or a matrix `[rows, in]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = if g.shape(x).len() == 1 {
            let row = g.reshape(x, &[1, self.in_dim])?;
            let y = g.matmul(row, w)?;
            g.reshape(y, &[self.out_dim])?
        } else {
            g.matmul(x, w)?
        };
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        core::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Two-layer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dims.0, dims.1, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dims.1, dims.2, true)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = self.activation.apply(g, h)?;
        self.fc2.forward(g, h)
    }
}

/// Down-project, activate, up-project. The up-projection starts at zero, so
/// the residual form `h + delta(h)` is exactly the identity at initialization.
#[derive(Clone, Debug)]
pub struct BottleneckAdapter {
    pub down: Linear,
    pub up: Linear,
    pub activation: Activation,
}

impl BottleneckAdapter {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        rank: usize,
        activation: Activation,
    ) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::Config(format!(
                "adapter `{name}` rank {rank} must lie in 1..={dim}"
            )));
        }
        Ok(Self {
            down: Linear::new(store, rng, &format!("{name}.down"), dim, rank, true)?,
            up: Linear::zeros(store, &format!("{name}.up"), rank, dim, true)?,
            activation,
        })
    }

    /// The adapter branch alone: `W_up · act(W_down · h)`.
    pub fn delta(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let d = self.down.forward(g, h)?;
        let d = self.activation.apply(g, d)?;
        self.up.forward(g, d)
    }

    /// `h + delta(h)`.
    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let d = self.delta(g, h)?;
        g.add(d, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.down.params();
        p.extend(self.up.params());
        p
    }
}

/// Multi-head scaled dot-product attention with separate query, key and
/// value inputs. The output projection has no bias, so zeroing the value
/// projection zeroes the whole output. The key projection has no bias
/// either: softmax is shift-invariant, so a key bias never affects the output.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention `{name}`: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, false)?,
            heads,
            dim,
        })
    }

    /// `queries: [nq, d]`, `keys`/`values: [nk, d]` → `[nq, d]`.
    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, keys: Var, values: Var) -> Result<Var> {
        for v in [queries, keys, values] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != self.dim {
                return Err(crate::error::shape_err("attention", g.shape(v), &[self.dim]));
            }
        }
        if g.shape(keys)[0] != g.shape(values)[0] {
            return Err(crate::error::shape_err("attention", g.shape(keys), g.shape(values)));
        }
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_last(&outs)? };
        self.out.forward(g, merged)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.out]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Learned table of shape `shape`, drawn from `U(-scale, scale)`.
pub fn embedding(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    scale: f64,
) -> Result<ParamId> {
    store.add(name, uniform(rng, shape, scale))
}
