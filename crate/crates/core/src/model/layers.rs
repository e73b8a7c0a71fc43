//! Parameter naming/initialization and the pre-norm transformer pieces.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{AttnMask, Float, Graph, ParamId, ParamStore, Partition, Tensor, Var};

const EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Copy)]
pub(crate) struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

fn lookup<F: Float>(s: &ParamStore<F>, name: &str) -> Result<ParamId> {
    s.id(name)
        .ok_or_else(|| Error::Config(format!("parameter `{name}` is missing")))
}

impl LinearIds {
    pub fn resolve<F: Float>(s: &ParamStore<F>, p: &str) -> Result<Self> {
        Ok(Self {
            w: lookup(s, &format!("{p}.w"))?,
            b: lookup(s, &format!("{p}.b"))?,
        })
    }
}

impl NormIds {
    pub fn resolve<F: Float>(s: &ParamStore<F>, p: &str) -> Result<Self> {
        Ok(Self {
            gain: lookup(s, &format!("{p}.g"))?,
            bias: lookup(s, &format!("{p}.b"))?,
        })
    }
}

impl AttnIds {
    pub fn resolve<F: Float>(s: &ParamStore<F>, p: &str) -> Result<Self> {
        Ok(Self {
            q: LinearIds::resolve(s, &format!("{p}.q"))?,
            k: LinearIds::resolve(s, &format!("{p}.k"))?,
            v: LinearIds::resolve(s, &format!("{p}.v"))?,
            o: LinearIds::resolve(s, &format!("{p}.o"))?,
        })
    }
}

impl FfnIds {
    pub fn resolve<F: Float>(s: &ParamStore<F>, p: &str) -> Result<Self> {
        Ok(Self {
            up: LinearIds::resolve(s, &format!("{p}.up"))?,
            down: LinearIds::resolve(s, &format!("{p}.down"))?,
        })
    }
}

/// Adds freshly initialized parameters to a store, in call order.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    /// Weight `d_in × d_out` with std `gain / √d_in`, zero bias.
    pub fn linear(&mut self, name: &str, part: Partition, d_in: usize, d_out: usize, gain: f64) -> Result<()> {
        let w = self.normal(&[d_in, d_out], gain / (d_in as f64).sqrt());
        self.store.add(&format!("{name}.w"), part, w)?;
        self.store.add(&format!("{name}.b"), part, Tensor::zeros(&[d_out]))?;
        Ok(())
    }

    pub fn embedding(&mut self, name: &str, part: Partition, rows: usize, d: usize) -> Result<()> {
        let t = self.normal(&[rows, d], EMBED_STD);
        self.store.add(name, part, t)?;
        Ok(())
    }

    pub fn norm(&mut self, name: &str, part: Partition, d: usize) -> Result<()> {
        self.store.add(&format!("{name}.g"), part, Tensor::full(&[d], 1.0))?;
        self.store.add(&format!("{name}.b"), part, Tensor::zeros(&[d]))?;
        Ok(())
    }

    /// Residual-branch outputs are scaled down by `1/√(2·depth)`.
    pub fn attention(&mut self, name: &str, part: Partition, d: usize, depth: usize) -> Result<()> {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), part, d, d, 1.0)?;
        }
        self.linear(&format!("{name}.o"), part, d, d, residual_gain(depth))
    }

    pub fn ffn(&mut self, name: &str, part: Partition, d: usize, hidden: usize, depth: usize) -> Result<()> {
        self.linear(&format!("{name}.up"), part, d, hidden, 1.0)?;
        self.linear(&format!("{name}.down"), part, hidden, d, residual_gain(depth))
    }

    pub fn block(&mut self, name: &str, part: Partition, d: usize, hidden: usize, depth: usize) -> Result<()> {
        self.norm(&format!("{name}.ln_attn"), part, d)?;
        self.attention(&format!("{name}.attn"), part, d, depth)?;
        self.norm(&format!("{name}.ln_ffn"), part, d)?;
        self.ffn(&format!("{name}.ffn"), part, d, hidden, depth)
    }
}

fn residual_gain(depth: usize) -> f64 {
    1.0 / (2.0 * depth.max(1) as f64).sqrt()
}

pub(crate) fn linear<F: Float>(g: &mut Graph<'_, F>, x: Var, ids: LinearIds) -> Result<Var> {
    let (w, b) = (g.param(ids.w), g.param(ids.b));
    g.linear(x, w, Some(b))
}

pub(crate) fn norm<F: Float>(g: &mut Graph<'_, F>, x: Var, ids: NormIds) -> Result<Var> {
    let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
    g.layer_norm(x, gain, bias)
}

pub(crate) fn ffn<F: Float>(g: &mut Graph<'_, F>, x: Var, ids: &FfnIds) -> Result<Var> {
    let h = linear(g, x, ids.up)?;
    let h = g.gelu(h);
    linear(g, h, ids.down)
}

/// Multi-head attention of `xq` rows over `xkv` rows. Returns the projected
/// output and the raw attention node (for its weights).
pub(crate) fn attention<F: Float>(
    g: &mut Graph<'_, F>,
    xq: Var,
    xkv: Var,
    ids: &AttnIds,
    heads: usize,
    mask: AttnMask,
) -> Result<(Var, Var)> {
    let q = linear(g, xq, ids.q)?;
    let k = linear(g, xkv, ids.k)?;
    let v = linear(g, xkv, ids.v)?;
    let a = g.attention(q, k, v, heads, mask)?;
    Ok((linear(g, a, ids.o)?, a))
}

/// Pre-norm self-attention + feed-forward block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block<F: Float>(
    g: &mut Graph<'_, F>,
    x: Var,
    ln_attn: NormIds,
    attn: &AttnIds,
    ln_ffn: NormIds,
    ffn_ids: &FfnIds,
    heads: usize,
    mask: AttnMask,
) -> Result<Var> {
    let h = norm(g, x, ln_attn)?;
    let (a, _) = attention(g, h, h, attn, heads, mask)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, ln_ffn)?;
    let f = ffn(g, h, ffn_ids)?;
    g.add(x, f)
}
