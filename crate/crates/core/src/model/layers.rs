//! Transformer building blocks recorded on a [`Graph`].

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
/// Additive mask value for disallowed attention positions.
const MASKED: f64 = -1e9;

/// Registers parameters under a name prefix with seeded initialisation.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::from_fn(shape, |_| T::of(value)))
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        self.store.insert(name, t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let w = self.normal(&format!("{name}.w"), vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        let b = if bias { Some(self.constant(&format!("{name}.b"), vec![fan_out], 0.0)?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.constant(&format!("{name}.g"), vec![dim], 1.0)?,
            beta: self.constant(&format!("{name}.b"), vec![dim], 0.0)?,
        })
    }

}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// Returns the concatenated head outputs and the per-head attention matrices.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let a = g.softmax_rows(scores)?;
        outs.push(g.matmul(a, vh)?);
        maps.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, maps))
}

/// Lower-triangular additive mask for `t` positions.
pub fn causal_mask<T: Scalar>(g: &mut Graph<T>, t: usize) -> Result<Var> {
    let data = (0..t * t)
        .map(|i| if i % t > i / t { T::of(MASKED) } else { T::zero() })
        .collect();
    g.constant(vec![t, t], data)
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: init.linear(&format!("{name}.q"), d, d, true)?,
            k: init.linear(&format!("{name}.k"), d, d, true)?,
            v: init.linear(&format!("{name}.v"), d, d, true)?,
            o: init.linear(&format!("{name}.o"), d, d, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(g, s, x)?;
        let k = self.k.forward(g, s, context)?;
        let v = self.v.forward(g, s, context)?;
        let (h, _) = attention(g, q, k, v, self.heads, mask)?;
        self.o.forward(g, s, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, mult: usize) -> Result<Self> {
        Ok(FeedForward {
            up: init.linear(&format!("{name}.up"), d, d * mult, true)?,
            down: init.linear(&format!("{name}.down"), d * mult, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h);
        self.down.forward(g, s, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub(crate) fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: init.layer_norm(&format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads)?,
            ln2: init.layer_norm(&format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, mult)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, s, x)?;
        let h = self.ffn.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub(crate) fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: init.layer_norm(&format!("{name}.ln1"), d)?,
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self"), d, heads)?,
            ln2: init.layer_norm(&format!("{name}.ln2"), d)?,
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross"), d, heads)?,
            ln3: init.layer_norm(&format!("{name}.ln3"), d)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, mult)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        memory: Var,
        mask: Var,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let h = self.self_attn.forward(g, s, h, h, Some(mask))?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, s, x)?;
        let h = self.cross_attn.forward(g, s, h, memory, None)?;
        let x = g.add(x, h)?;
        let h = self.ln3.forward(g, s, x)?;
        let h = self.ffn.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// Stack of encoder layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub ln_f: LayerNorm,
}

impl EncoderStack {
    pub(crate) fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
        mult: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(init, &format!("{name}.{i}"), d, heads, mult))
            .collect::<Result<_>>()?;
        Ok(EncoderStack { layers, ln_f: init.layer_norm(&format!("{name}.ln_f"), d)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, mut x: Var, mask: Option<Var>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, s, x, mask)?;
        }
        self.ln_f.forward(g, s, x)
    }
}
