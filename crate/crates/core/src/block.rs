//! Pre-norm transformer block shared by the vision encoder and the decoder.

use vitp_autodiff::{Element, Graph, Var};

use crate::error::Result;
use crate::params::{Bound, Declarer, Init, ParamId};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn declare<T: Element>(d: &mut Declarer<T>, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Linear {
            w: d.param(&format!("{name}.w"), &[inp, out], Init::TruncNormal(INIT_STD))?,
            b: d.param(&format!("{name}.b"), &[out], Init::Zeros)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        Ok(g.add_bias(y, p[self.b])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare<T: Element>(d: &mut Declarer<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: d.param(&format!("{name}.g"), &[dim], Init::Ones)?,
            beta: d.param(&format!("{name}.b"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layernorm(x, p[self.gamma], p[self.beta])?)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    heads: usize,
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn declare<T: Element>(
        d: &mut Declarer<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Block {
            heads,
            ln1: LayerNorm::declare(d, &format!("{name}.ln1"), dim)?,
            qkv: Linear::declare(d, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::declare(d, &format!("{name}.proj"), dim, dim)?,
            ln2: LayerNorm::declare(d, &format!("{name}.ln2"), dim)?,
            fc1: Linear::declare(d, &format!("{name}.fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::declare(d, &format!("{name}.fc2"), mlp_ratio * dim, dim)?,
        })
    }

    /// `segments` splits the rows of `x` into independent sequences.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        segments: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let a = g.attention(qkv, self.heads, segments, causal)?;
        let a = self.proj.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}
